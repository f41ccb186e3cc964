"""Feature fusion, gallery ranking and the single-query mAP / CMC protocol."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data_io import SampleRecord
from .error_handler import DimensionError, EvaluationError, FormatError
from .tensor_core import Tensor

logger = logging.getLogger(__name__)


def _normalized(vector: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vector)
    return np.zeros_like(vector) if norm == 0 else vector / norm


def fuse_features(f_G: Optional[Tensor], f_L: Optional[Tensor]) -> Tensor:
    """Concatenate the separately L2-normalized halves; a missing branch is left out, a zero half stays zero"""
    halves = [t.data for t in (f_G, f_L) if t is not None]
    if not halves:
        raise DimensionError("fuse_features needs at least one feature vector")
    if len(halves) == 2 and halves[0].shape != halves[1].shape:
        raise DimensionError(f"Global and local features differ in extent: {halves[0].shape} vs {halves[1].shape}")
    return Tensor(np.concatenate([_normalized(h) for h in halves]))


@dataclass
class GalleryIndex:
    features: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray
    junk: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def build_index(features: Sequence[Tensor], records: Sequence[SampleRecord]) -> GalleryIndex:
    if len(features) != len(records):
        raise DimensionError(f"{len(features)} feature rows for {len(records)} records")
    if not features:
        raise EvaluationError("Cannot build an index from an empty set")
    matrix = np.stack([f.data if isinstance(f, Tensor) else np.asarray(f) for f in features])
    return GalleryIndex(features=matrix,
                        person_ids=np.array([r.person_id for r in records], dtype=np.int64),
                        camera_ids=np.array([r.camera_id for r in records], dtype=np.int64),
                        junk=np.array([r.junk for r in records], dtype=bool))


def rank_gallery(query: Tensor, index: GalleryIndex) -> np.ndarray:
    """Gallery indices by ascending Euclidean distance, lower index first on ties"""
    q = query.data if isinstance(query, Tensor) else np.asarray(query)
    if q.shape != index.features.shape[1:]:
        raise DimensionError(f"Query feature {q.shape} does not match gallery features {index.features.shape[1:]}")
    distances = np.sqrt(((index.features - q) ** 2).sum(axis=1))
    return np.argsort(distances, kind='stable')


def average_precision(relevant: np.ndarray) -> float:
    """Mean of precision@k over the ranks k holding a relevant item"""
    hits = np.flatnonzero(relevant)
    if not hits.size:
        return 0.0
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


@dataclass
class EvalReport:
    mAP: float
    cmc: List[float]
    ranks: List[int]
    per_query_ap: List[float] = field(default_factory=list)
    evaluated: int = 0
    skipped: int = 0

    def rank(self, r: int) -> float:
        """CMC@r"""
        return self.cmc[r - 1]

    def summary(self) -> Dict[str, float]:
        values = {'mAP': self.mAP}
        for r in self.ranks:
            if r <= len(self.cmc):
                values[f'rank{r}'] = self.cmc[r - 1]
        return values


def evaluate(queries: GalleryIndex, gallery: GalleryIndex, ranks_wanted: Sequence[int] = (1, 5, 10)) -> EvalReport:
    """Single-query evaluation with same-identity-same-camera and junk items removed per query"""
    max_rank = max(ranks_wanted)
    hits_at = np.zeros(max_rank)
    aps = []
    skipped = 0
    for i in range(len(queries)):
        order = rank_gallery(queries.features[i], gallery)
        pid, cam = queries.person_ids[i], queries.camera_ids[i]
        keep = ~(gallery.junk[order] | ((gallery.person_ids[order] == pid) & (gallery.camera_ids[order] == cam)))
        relevant = gallery.person_ids[order][keep] == pid
        if not relevant.any():
            skipped += 1
            continue
        aps.append(average_precision(relevant))
        first = int(np.argmax(relevant))
        if first < max_rank:
            hits_at[first:] += 1

    if not aps:
        raise EvaluationError(f"All {len(queries)} queries were skipped: none has a relevant cross-camera gallery item")
    if skipped:
        logger.info(f"Skipped {skipped} of {len(queries)} queries without a relevant gallery item")
    cmc = (hits_at / len(aps)).tolist()
    return EvalReport(mAP=float(np.mean(aps)), cmc=cmc, ranks=sorted(ranks_wanted),
                      per_query_ap=aps, evaluated=len(aps), skipped=skipped)


def format_report(report: EvalReport) -> str:
    lines = [f"mAP: {report.mAP!r}",
             f"queries_evaluated: {report.evaluated}",
             f"queries_skipped: {report.skipped}"]
    for r in report.ranks:
        lines.append(f"rank{r}: {report.cmc[r - 1]!r}")
    lines.append("")
    lines.append("rank\tcmc")
    for k, value in enumerate(report.cmc, start=1):
        lines.append(f"{k}\t{value!r}")
    return '\n'.join(lines) + '\n'


def parse_report(text: str) -> EvalReport:
    """Inverse of format_report; per-query APs are not part of the document"""
    header: Dict[str, str] = {}
    cmc: List[Tuple[int, float]] = []
    in_table = False
    try:
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.strip() == 'rank\tcmc':
                in_table = True
                continue
            if in_table:
                rank, value = line.split('\t')
                cmc.append((int(rank), float(value)))
            else:
                key, value = (part.strip() for part in line.split(':', 1))
                header[key] = value
        ranks = sorted(int(key[4:]) for key in header if key.startswith('rank'))
        return EvalReport(mAP=float(header['mAP']), cmc=[value for _, value in sorted(cmc)], ranks=ranks,
                          evaluated=int(header['queries_evaluated']), skipped=int(header['queries_skipped']))
    except (KeyError, ValueError) as e:
        raise FormatError(f"Malformed evaluation report: {e}") from None
