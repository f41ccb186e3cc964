"""The two-branch re-identification network.

Global branch: I1 -> (SS1) -> Z1 -> I2 -> Z2 -> I3 -> GAP -> FCG1 -> f_G -> FCG2.
Local branch, per part s: I2_s(slice(Z1)[s]) cross-attends slice(Z2)[s], then
I3_s -> GAP; part vectors are concatenated -> FCL1 -> f_L -> FCL2.

Parameters live in one flat dict keyed by stable dotted names, e.g.
``global.I1.path1.kernels``, ``local.2.CC2.W_f`` and ``head.FCG1.weight``.
"""
import logging
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data_io
from .attention import (WEIGHT_NAMES, AttentionWeights, cca_forward, default_k, from_positional,
                        ssa_forward, to_positional)
from .config import SETTINGS, RunConfig, derive_seed, feature_extents
from .error_handler import ConfigurationError, DimensionError, FormatError
from .tensor_core import (Tensor, affine, bilinear_resize, concat, conv2d, from_numpy, global_avg_pool,
                          inference_mode, pool2d, relu, slice_axis, stack_rows)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    input_h: int
    input_w: int
    channels: Tuple[int, int, int]
    pools: Tuple[int, int, int]
    d: int
    k_p: int
    num_ids: int
    setting: str = 'full'
    attn_k: int = 0

    @classmethod
    def from_run_config(cls, cfg: RunConfig, num_ids: int) -> 'ModelConfig':
        return cls(input_h=cfg.input_h, input_w=cfg.input_w, channels=tuple(cfg.channels),
                   pools=tuple(cfg.pools), d=cfg.d, k_p=cfg.k_p, num_ids=num_ids,
                   setting=cfg.setting, attn_k=cfg.attn_k)

    @property
    def components(self) -> frozenset:
        return SETTINGS[self.setting]

    @property
    def extents(self) -> Dict[str, Tuple[int, int]]:
        return feature_extents(self.input_h, self.input_w, self.pools, self.k_p)

    def to_header(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ','.join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_header(cls, text: str) -> 'ModelConfig':
        raw = {}
        for line in text.splitlines():
            if '=' in line:
                key, value = (part.strip() for part in line.split('=', 1))
                raw[key] = value
        try:
            values = {}
            for f in fields(cls):
                if f.name not in raw:
                    raise KeyError(f.name)
                if f.name in ('channels', 'pools'):
                    values[f.name] = tuple(int(v) for v in raw[f.name].split(','))
                elif f.name == 'setting':
                    values[f.name] = raw[f.name]
                else:
                    values[f.name] = int(raw[f.name])
        except (KeyError, ValueError) as e:
            raise FormatError(f"Checkpoint config header is incomplete or malformed: {e}") from None
        return cls(**values)


@dataclass
class BackboneBlockParams:
    """Two-path block: 1x1 and 3x3 convolutions, concatenated, optionally avg-pooled by 2"""
    path1: Tensor
    path2: Tensor
    pool: bool

    @property
    def out_channels(self) -> int:
        return self.path1.shape[3] + self.path2.shape[3]


def backbone_block_forward(x: Tensor, p: BackboneBlockParams) -> Tensor:
    if x.ndim != 3 or x.shape[2] != p.path1.shape[2]:
        raise DimensionError(f"Block expects an H x W x {p.path1.shape[2]} input, got {x.shape}")
    out = concat([relu(conv2d(x, p.path1)), relu(conv2d(x, p.path2, stride=1, pad=1))], axis=2)
    if p.pool:
        out = pool2d(out, 'avg', 2, 2)
    return out


def slice_parts(Z: Tensor, k_p: int) -> List[Tensor]:
    """k_p horizontal strips of Z, each bilinearly resized back to Z's extent"""
    M, N, _ = Z.shape
    if M % k_p:
        raise ConfigurationError(f"Cannot slice a height-{M} map into k_p={k_p} equal parts")
    rows = M // k_p
    return [bilinear_resize(slice_axis(Z, 0, s * rows, (s + 1) * rows), M, N) for s in range(k_p)]


def _split_channels(c_out: int) -> Tuple[int, int]:
    c1 = c_out // 2
    return c1, c_out - c1


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter of a configuration, in a fixed order"""
    c1, c2, c3 = config.channels
    comps = config.components
    extents = config.extents
    shapes: Dict[str, Tuple[int, ...]] = {}

    def block(prefix, c_in, c_out):
        a, b = _split_channels(c_out)
        shapes[f'{prefix}.path1.kernels'] = (1, 1, c_in, a)
        shapes[f'{prefix}.path2.kernels'] = (3, 3, c_in, b)

    def attention(prefix, M, N, C):
        K = config.attn_k or default_k(C)
        MN = M * N
        for name, shape in zip(WEIGHT_NAMES, ((K, C), (K, C), (K, C), (C, K), (2 * MN, MN))):
            shapes[f'{prefix}.{name}'] = shape

    def fc(prefix, n_in, n_out):
        shapes[f'{prefix}.weight'] = (n_in, n_out)
        shapes[f'{prefix}.bias'] = (n_out,)

    block('global.I1', 3, c1)
    if 'SS' in comps:
        attention('global.SS1', *extents['Z1'], c1)
    block('global.I2', c1, c2)
    if 'G' in comps:
        block('global.I3', c2, c3)
    if 'L' in comps:
        for s in range(1, config.k_p + 1):
            block(f'local.{s}.I2', c1, c2)
            if 'CC' in comps:
                attention(f'local.{s}.CC2', *extents['Z2'], c2)
            block(f'local.{s}.I3', c2, c3)
    if 'G' in comps:
        fc('head.FCG1', c3, config.d)
        fc('head.FCG2', config.d, config.num_ids)
    if 'L' in comps:
        fc('head.FCL1', c3 * config.k_p, config.d)
        fc('head.FCL2', config.d, config.num_ids)
    return shapes


def _init_parameter(name: str, shape: Tuple[int, ...], seed: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(seed, f'init.{name}'))
    leaf = name.rsplit('.', 1)[1]
    if leaf == 'bias':
        return np.zeros(shape)
    if leaf == 'kernels':
        kh, kw, c_in, _ = shape
        bound = np.sqrt(6.0 / (kh * kw * c_in))
    elif leaf == 'weight':
        bound = np.sqrt(1.0 / shape[0])
    else:
        # attention maps: fan_in is the contracted extent
        fan_in = shape[0] if leaf == 'W_alpha' else shape[1]
        bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class CcanModel:
    """Configuration plus named parameters; blocks and attention units are views built on demand"""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor], debug: bool = False):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigurationError(f"Parameter set does not match the configuration (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}
        self.debug = debug

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def with_parameters(self, params: Dict[str, Tensor]) -> 'CcanModel':
        merged = dict(self.params)
        merged.update(params)
        return CcanModel(self.config, merged, debug=self.debug)

    def block(self, prefix: str) -> BackboneBlockParams:
        level = prefix.rsplit('.', 1)[1]
        pool = bool(self.config.pools[int(level[1]) - 1])
        return BackboneBlockParams(self.params[f'{prefix}.path1.kernels'],
                                   self.params[f'{prefix}.path2.kernels'], pool)

    def attention(self, prefix: str) -> AttentionWeights:
        level = 'Z1' if prefix.endswith('SS1') else 'Z2'
        M, N = self.config.extents[level]
        return AttentionWeights.from_tensors(
            {name: self.params[f'{prefix}.{name}'] for name in WEIGHT_NAMES}, M, N)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def build_model(config: ModelConfig, seed: int = 0, debug: bool = False) -> CcanModel:
    """Validate the topology and draw seeded initial parameters"""
    if config.setting not in SETTINGS:
        raise ConfigurationError(f"Unknown ablation setting '{config.setting}'")
    if min(config.channels) < 2 or config.num_ids < 2 or config.d < 1:
        raise ConfigurationError("channels must be >= 2, num_ids >= 2 and d >= 1")
    shapes = parameter_shapes(config)
    params = {name: Tensor(_init_parameter(name, shape, seed), requires_grad=True, name=name)
              for name, shape in shapes.items()}
    model = CcanModel(config, params, debug=debug)
    logger.info(f"Built {config.setting} model with {model.num_parameters()} parameters "
                f"(channels {config.channels}, d={config.d}, k_p={config.k_p})")
    return model


@dataclass
class ForwardOutputs:
    f_G: Optional[Tensor] = None
    logits_G: Optional[Tensor] = None
    f_L: Optional[Tensor] = None
    logits_L: Optional[Tensor] = None
    debug: Dict[str, object] = field(default_factory=dict)


@dataclass
class BatchOutputs:
    """Batch-stacked head outputs (B x d, B x num_ids); absent branches stay None"""
    f_G: Optional[Tensor] = None
    logits_G: Optional[Tensor] = None
    f_L: Optional[Tensor] = None
    logits_L: Optional[Tensor] = None
    debug: List[Dict[str, object]] = field(default_factory=list)

    def __len__(self) -> int:
        present = self.f_G if self.f_G is not None else self.f_L
        return present.shape[0]

    def items(self) -> List[ForwardOutputs]:
        def row(t, i):
            return None if t is None else Tensor(t.data[i])
        return [ForwardOutputs(row(self.f_G, i), row(self.logits_G, i), row(self.f_L, i),
                               row(self.logits_L, i), self.debug[i] if self.debug else {})
                for i in range(len(self))]


def _sample_forward(x: Tensor, model: CcanModel) -> Tuple[Optional[Tensor], Optional[Tensor], Dict[str, object]]:
    """Backbone and attention for one image; returns the global GAP vector and the part concat"""
    config = model.config
    comps = config.components
    debug = {}

    z1 = backbone_block_forward(x, model.block('global.I1'))
    if 'SS' in comps:
        M1, N1 = config.extents['Z1']
        z1 = from_positional(ssa_forward(to_positional(z1), model.attention('global.SS1')), M1, N1)
    z2 = backbone_block_forward(z1, model.block('global.I2'))
    if model.debug:
        debug['Z1'], debug['Z2'] = z1.data.copy(), z2.data.copy()

    global_vec = None
    if 'G' in comps:
        global_vec = global_avg_pool(backbone_block_forward(z2, model.block('global.I3')))

    local_vec = None
    if 'L' in comps:
        part_vectors = []
        for s, (strip1, strip2) in enumerate(zip(slice_parts(z1, config.k_p), slice_parts(z2, config.k_p)), start=1):
            q = backbone_block_forward(strip1, model.block(f'local.{s}.I2'))
            if 'CC' in comps:
                if q.shape != strip2.shape:
                    raise ConfigurationError(
                        f"Part {s}: cross-attention inputs disagree ({q.shape} vs {strip2.shape})")
                M2, N2, _ = q.shape
                q = from_positional(
                    cca_forward(to_positional(q), to_positional(strip2), model.attention(f'local.{s}.CC2')), M2, N2)
            part_vectors.append(global_avg_pool(backbone_block_forward(q, model.block(f'local.{s}.I3'))))
        if model.debug:
            debug['parts'] = [v.data.copy() for v in part_vectors]
        local_vec = concat(part_vectors, axis=0)
    return global_vec, local_vec, debug


def _check_batch(batch: Sequence[Tensor], config: ModelConfig) -> None:
    if not batch:
        raise ConfigurationError("Forward pass needs a nonempty batch")
    expected = (config.input_h, config.input_w, 3)
    for i, image in enumerate(batch):
        if image.shape != expected:
            raise DimensionError(f"Batch item {i} has shape {image.shape}, model expects {expected}")


def ccan_forward(batch: Sequence[Tensor], model: CcanModel, heads: bool = True) -> BatchOutputs:
    """Forward a batch; with heads=False the classification layers are skipped"""
    _check_batch(batch, model.config)
    params = model.params
    global_vecs, local_vecs, debugs = [], [], []
    for x in batch:
        g, l, debug = _sample_forward(x, model)
        global_vecs.append(g)
        local_vecs.append(l)
        debugs.append(debug)

    out = BatchOutputs(debug=debugs if model.debug else [])
    comps = model.config.components
    if 'G' in comps:
        out.f_G = affine(stack_rows(global_vecs), params['head.FCG1.weight'], params['head.FCG1.bias'])
        if heads:
            out.logits_G = affine(out.f_G, params['head.FCG2.weight'], params['head.FCG2.bias'])
    if 'L' in comps:
        out.f_L = affine(stack_rows(local_vecs), params['head.FCL1.weight'], params['head.FCL1.bias'])
        if heads:
            out.logits_L = affine(out.f_L, params['head.FCL2.weight'], params['head.FCL2.bias'])
    return out


def extract_features(batch: Sequence[Tensor], model: CcanModel) -> List[Tuple[Optional[Tensor], Optional[Tensor]]]:
    """Embeddings (f_G, f_L) per image, computed without recording"""
    with inference_mode():
        out = ccan_forward(batch, model, heads=False)
    rows = []
    for i in range(len(batch)):
        f_G = None if out.f_G is None else Tensor(out.f_G.data[i])
        f_L = None if out.f_L is None else Tensor(out.f_L.data[i])
        rows.append((f_G, f_L))
    return rows


def save_checkpoint(path: str, model: CcanModel) -> None:
    data_io.write_checkpoint(path, model.config.to_header(),
                             {name: t.data for name, t in model.params.items()})
    logger.debug(f"Wrote checkpoint {path} ({len(model.params)} tensors)")


def load_checkpoint(path: str, debug: bool = False) -> CcanModel:
    header, entries = data_io.read_checkpoint(path)
    config = ModelConfig.from_header(header)
    expected = parameter_shapes(config)
    if set(entries) != set(expected):
        raise FormatError(f"Checkpoint {path} does not hold the parameters its header describes")
    params = {name: from_numpy(entries[name], requires_grad=True) for name in expected}
    return CcanModel(config, params, debug=debug)
