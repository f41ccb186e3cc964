"""Command-line entry point: synthetic data, training, evaluation, ablation and verification.

    python app.py gen-data --ids 16 --per-id 8 --cams 2 --seed 7 --out data/
    python app.py train --config configs/toy.cfg
    python app.py eval --config configs/toy.cfg
    python app.py ablate --config configs/toy.cfg --resume
    python app.py gradcheck
    python app.py selftest
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from database import default_database_url, get_db_manager
from utils.config import (EVAL_RESOLVED_NAME, SETTING_LABELS, SETTING_ORDER, RunConfig, load_config, parse_overrides,
                          write_resolved)
from utils.data_io import AugmentConfig, Dataset, SEPARABILITY_NOISE_THRESHOLD, eval_transform, read_manifest, \
    separability, synth_generate
from utils.error_handler import EXIT_OK, EXIT_RUNTIME, ConfigurationError, ErrorHandler, ledger_safe
from utils.network import CcanModel, ModelConfig, build_model, extract_features, load_checkpoint, save_checkpoint
from utils.optim import EpochRecord, train, write_history
from utils.retrieval_eval import EvalReport, build_index, evaluate, format_report, fuse_features
from utils.selfcheck import gradcheck_suite, selftest
from utils.tensor_core import set_precision

logger = logging.getLogger(__name__)

MODEL_NAME = 'model.ccac'
HISTORY_NAME = 'history.jsonl'
REPORT_NAME = 'report.txt'
ABLATION_NAME = 'ablation.tsv'


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """Config file < --set assignments < dedicated flags"""
    overrides = parse_overrides(args.set)
    for key in ('data', 'out', 'setting', 'seed'):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cfg = load_config(args.config, overrides)
    set_precision(cfg.precision)
    return cfg


def open_ledger(out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    return ledger_safe(lambda: get_db_manager(default_database_url(out_dir)))


class LedgerRun:
    """Best-effort bookkeeping of one command; every call is a no-op once the ledger is unavailable"""

    def __init__(self, db, command: str, cfg: RunConfig, output_dir: str):
        self.db = db
        self.run_id = None
        if db is not None:
            self.run_id = ledger_safe(lambda: db.start_run(command, cfg.setting, cfg.fingerprint(), output_dir))

    @property
    def active(self) -> bool:
        return self.db is not None and self.run_id is not None

    def epoch(self, record: EpochRecord) -> None:
        if self.active:
            ledger_safe(lambda: self.db.record_epoch(self.run_id, record))

    def evaluation(self, report: EvalReport, extra: Optional[Dict[str, object]] = None) -> None:
        if self.active:
            ledger_safe(lambda: self.db.record_eval(self.run_id, report, extra))

    def finish(self, status: str = 'completed', error: Optional[str] = None) -> None:
        if self.active:
            ledger_safe(lambda: self.db.finish_run(self.run_id, status, error))


def run_training(cfg: RunConfig, dataset: Dataset, out_dir: str, ledger: LedgerRun) -> CcanModel:
    """Train from scratch and write the checkpoint, history and resolved config into `out_dir`"""
    write_resolved(cfg, out_dir)
    _, label_of = dataset.train_labels()
    model = build_model(ModelConfig.from_run_config(cfg, num_ids=len(label_of)), seed=cfg.seed)
    model, history = train(model, dataset, cfg, checkpoint_dir=out_dir, on_epoch=ledger.epoch)
    save_checkpoint(os.path.join(out_dir, MODEL_NAME), model)
    write_history(os.path.join(out_dir, HISTORY_NAME), history)
    logger.info(f"Wrote {MODEL_NAME} and {HISTORY_NAME} to {out_dir}")
    return model


def embed_split(model: CcanModel, dataset: Dataset, indices: Sequence[int], chunk: int, progress: bool):
    """Fused embeddings of the given records, extracted `chunk` images at a time"""
    config = model.config
    crop = (config.input_h, config.input_w)
    transform = AugmentConfig(resize_to=crop, crop_to=crop)
    features = []
    starts = range(0, len(indices), chunk)
    for start in tqdm(starts, desc="embedding", leave=False, disable=not (progress and sys.stderr.isatty())):
        batch = [eval_transform(dataset.image(i), transform) for i in indices[start:start + chunk]]
        features.extend(fuse_features(f_G, f_L) for f_G, f_L in extract_features(batch, model))
    return features


def run_evaluation(cfg: RunConfig, model: CcanModel, dataset: Dataset, out_dir: str) -> EvalReport:
    query_idx, gallery_idx = dataset.indices('query'), dataset.indices('gallery')
    if not query_idx or not gallery_idx:
        raise ConfigurationError(
            f"Evaluation needs query and gallery records, manifest has {len(query_idx)} and {len(gallery_idx)}")
    queries = build_index(embed_split(model, dataset, query_idx, cfg.batch, cfg.progress),
                          [dataset.records[i] for i in query_idx])
    gallery = build_index(embed_split(model, dataset, gallery_idx, cfg.batch, cfg.progress),
                          [dataset.records[i] for i in gallery_idx])
    ranks = [r for r in cfg.ranks if r <= len(gallery)] or [1]
    report = evaluate(queries, gallery, ranks)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, REPORT_NAME), 'w', encoding='utf-8') as handle:
        handle.write(format_report(report))
    logger.info(f"mAP {report.mAP:.4f}, rank-1 {report.rank(1):.4f} over {report.evaluated} queries")
    return report


def print_table(header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    print('\t'.join(header))
    for row in rows:
        print('\t'.join(f"{value:.4f}" if isinstance(value, float) else str(value) for value in row))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def parse_size(text: str) -> Tuple[int, int]:
    try:
        height, width = (int(part) for part in text.lower().split('x'))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    return height, width


def cmd_gen_data(args: argparse.Namespace) -> int:
    manifest = synth_generate(args.out, num_ids=args.ids, per_id=args.per_id, cams=args.cams, size=args.size,
                              noise=args.noise, seed=args.seed, k_p=args.k_p,
                              train_fraction=args.train_fraction, distractors=args.distractors,
                              image_format=args.format)
    intra, inter = separability(read_manifest(manifest), seed=args.seed)
    logger.info(f"Separability: mean intra-id distance {intra:.4f}, mean inter-id distance {inter:.4f}")
    if args.noise <= SEPARABILITY_NOISE_THRESHOLD and intra >= inter:
        logger.warning("Identities are not separable at this noise level; regenerate with another seed")
    print(manifest)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args)
    dataset = read_manifest(cfg.data)
    ledger = LedgerRun(open_ledger(cfg.out), 'train', cfg, cfg.out)
    try:
        run_training(cfg, dataset, cfg.out, ledger)
    except Exception as e:
        ledger.finish('failed', str(e))
        raise
    ledger.finish()
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args)
    checkpoint = args.checkpoint or os.path.join(cfg.out, MODEL_NAME)
    model = load_checkpoint(checkpoint)
    dataset = read_manifest(cfg.data)
    # resolved.cfg belongs to the training run
    write_resolved(cfg, cfg.out, EVAL_RESOLVED_NAME)
    ledger = LedgerRun(open_ledger(cfg.out), 'eval', cfg, cfg.out)
    try:
        report = run_evaluation(cfg, model, dataset, cfg.out)
    except Exception as e:
        ledger.finish('failed', str(e))
        raise
    ledger.evaluation(report, {'checkpoint': os.path.abspath(checkpoint)})
    ledger.finish()
    print(format_report(report), end='')
    return EXIT_OK


def ablation_plan(cfg: RunConfig) -> List[Tuple[str, RunConfig]]:
    """The six settings in fixed order, then the d and k_p sweeps of the full model"""
    plan = []
    for setting in SETTING_ORDER:
        label = SETTING_LABELS[setting]
        plan.append((label, cfg.with_values(setting=setting, out=os.path.join(cfg.out, label.replace('+', '_')))))
    for d in cfg.sweep_d:
        label = f"CCAN d={d}"
        plan.append((label, cfg.with_values(setting='full', d=d, out=os.path.join(cfg.out, f"sweep_d_{d}"))))
    for k_p in cfg.sweep_k_p:
        label = f"CCAN k_p={k_p}"
        plan.append((label, cfg.with_values(setting='full', k_p=k_p, out=os.path.join(cfg.out, f"sweep_kp_{k_p}"))))
    return plan


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve_run_config(args)
    plan = ablation_plan(cfg)  # every variant is validated before training starts
    dataset = read_manifest(cfg.data)
    write_resolved(cfg, cfg.out)
    db = open_ledger(cfg.out)

    rows = []
    for label, variant in plan:
        stored = None
        if args.resume and db is not None:
            stored = ledger_safe(lambda: db.find_completed_run(variant.fingerprint(), variant.setting))
        if stored:
            logger.info(f"{label}: reusing completed run {stored['run_id']}")
            rows.append((label, stored['mAP'], stored['rank1'], stored['rank5'], stored['rank10']))
            continue

        logger.info(f"{label}: training in {variant.out}")
        ledger = LedgerRun(db, 'ablate', variant, variant.out)
        try:
            model = run_training(variant, dataset, variant.out, ledger)
            report = run_evaluation(variant, model, dataset, variant.out)
        except Exception as e:
            ledger.finish('failed', str(e))
            raise
        ledger.evaluation(report, {'label': label, 'd': variant.d, 'k_p': variant.k_p})
        ledger.finish()
        summary = report.summary()
        rows.append((label, report.mAP, summary.get('rank1'), summary.get('rank5'), summary.get('rank10')))

    header = ('setting', 'mAP', 'rank1', 'rank5', 'rank10')
    with open(os.path.join(cfg.out, ABLATION_NAME), 'w', encoding='utf-8') as handle:
        handle.write('\t'.join(header) + '\n')
        for row in rows:
            handle.write('\t'.join(str(value) for value in row) + '\n')
    print_table(header, rows)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rows = gradcheck_suite(tol=args.tol, seed=args.seed)
    print_table(('check', 'max_rel_err', 'passed', 'coords', 'resamples'),
                [(r.name, f"{r.max_rel_err:.3e}", 'pass' if r.passed else 'FAIL', r.coords, r.resamples)
                 for r in rows])
    return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME


def cmd_selftest(args: argparse.Namespace) -> int:
    rows = selftest()
    print_table(('check', 'passed', 'detail'), [(r.name, 'pass' if r.passed else 'FAIL', r.detail) for r in rows])
    failed = sum(not r.passed for r in rows)
    logger.info(f"{len(rows) - failed}/{len(rows)} self-test checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--verbose', action='store_true', help='debug logging and full tracebacks')

    run_options = argparse.ArgumentParser(add_help=False)
    run_options.add_argument('--config', help='key = value config file')
    run_options.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                             help='override one config key (repeatable)')
    run_options.add_argument('--data', help='manifest path (overrides the data key)')
    run_options.add_argument('--out', help='output directory (overrides the out key)')
    run_options.add_argument('--seed', type=int, help='root seed (overrides the seed key)')

    parser = argparse.ArgumentParser(prog='ccan', description='Cross-correlated attention networks for person re-identification')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen-data', parents=[common], help='write a synthetic identity dataset')
    gen.add_argument('--ids', type=int, default=16)
    gen.add_argument('--per-id', type=int, default=8, help='images per identity and camera')
    gen.add_argument('--cams', type=int, default=2)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--out', default='data')
    gen.add_argument('--noise', type=float, default=0.05)
    gen.add_argument('--size', type=parse_size, default=(64, 32), help='HxW, e.g. 64x32')
    gen.add_argument('--k-p', type=int, default=4, help='number of colour bands')
    gen.add_argument('--train-fraction', type=float, default=0.5)
    gen.add_argument('--distractors', type=int, default=0, help='junk gallery images')
    gen.add_argument('--format', choices=('tensor', 'ppm'), default='tensor')
    gen.set_defaults(func=cmd_gen_data)

    tr = commands.add_parser('train', parents=[common, run_options], help='train a model')
    tr.add_argument('--setting', choices=SETTING_ORDER, help='ablation setting (overrides the setting key)')
    tr.set_defaults(func=cmd_train)

    ev = commands.add_parser('eval', parents=[common, run_options], help='evaluate a checkpoint')
    ev.add_argument('--checkpoint', help=f'defaults to <out>/{MODEL_NAME}')
    ev.set_defaults(func=cmd_eval)

    ab = commands.add_parser('ablate', parents=[common, run_options], help='train and evaluate every setting')
    ab.add_argument('--resume', action='store_true', help='reuse completed runs recorded in the ledger')
    ab.set_defaults(func=cmd_ablate)

    gc = commands.add_parser('gradcheck', parents=[common], help='finite-difference gradient checks')
    gc.add_argument('--tol', type=float, default=1e-4)
    gc.add_argument('--seed', type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    st = commands.add_parser('selftest', parents=[common], help='run the built-in example checks')
    st.set_defaults(func=cmd_selftest)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse `argv`, run the command and return its exit code"""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    command = ErrorHandler.handle_exception(show_technical=args.verbose)(args.func)
    return command(args)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
