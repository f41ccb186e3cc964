"""Run configuration: a typed key=value schema, presets and seed derivation.

Config files hold one ``key = value`` assignment per line, ``#`` starts a comment.
Values are layered: schema defaults, then the selected preset, then the file,
then command-line overrides. Unknown keys are rejected before anything runs.
"""
import hashlib
import logging
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .error_handler import ConfigurationError

logger = logging.getLogger(__name__)

RESOLVED_NAME = 'resolved.cfg'
EVAL_RESOLVED_NAME = 'eval.cfg'

# ablation settings → enabled components; CC needs L
SETTINGS: Dict[str, frozenset] = {
    'G': frozenset({'G'}),
    'L': frozenset({'L'}),
    'G+L': frozenset({'G', 'L'}),
    'G+SS': frozenset({'G', 'SS'}),
    'G+L+CC': frozenset({'G', 'L', 'CC'}),
    'full': frozenset({'G', 'L', 'SS', 'CC'}),
}
SETTING_ORDER = ('G', 'L', 'G+L', 'G+SS', 'G+L+CC', 'full')
SETTING_LABELS = {
    'G': 'G', 'L': 'L', 'G+L': 'G+L', 'G+SS': 'G+SS1', 'G+L+CC': 'G+L+CC2', 'full': 'CCAN',
}

# Full-scale and desk-scale presets; explicit keys override them
PRESETS: Dict[str, Dict[str, object]] = {
    'market': {
        'input_h': 256, 'input_w': 128, 'resize_h': 288, 'resize_w': 144,
        'channels': (480, 832, 1024), 'pools': (1, 1, 1), 'd': 1024, 'k_p': 4,
        'lr0': 5e-4, 'tau': 1.0, 'epochs': 200, 'lr_plateau': 150, 'lr_decay_every': 50,
        'erasing_start_epoch': 50, 'v': 16, 'batch': 64, 'precision': 'float32',
    },
    'cuhk03': {
        'input_h': 256, 'input_w': 128, 'resize_h': 288, 'resize_w': 144,
        'channels': (480, 832, 1024), 'pools': (1, 1, 1), 'd': 1024, 'k_p': 4,
        'lr0': 1e-3, 'tau': 1.5, 'epochs': 200, 'lr_plateau': 150, 'lr_decay_every': 50,
        'erasing_start_epoch': 50, 'v': 16, 'batch': 64, 'precision': 'float32',
    },
    'toy': {},
    'lite': {
        'input_h': 8, 'input_w': 4, 'resize_h': 0, 'resize_w': 0,
        'channels': (8, 16, 24), 'pools': (1, 1, 0), 'd': 8, 'k_p': 2,
        'epochs': 2, 'lr_plateau': 1, 'lr_decay_every': 1, 'erasing_start_epoch': 1,
        'v': 2, 'batch': 4, 'r': 2,
    },
}
PRESETS['duke'] = dict(PRESETS['market'])


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a run. Defaults are the desk-scale toy setting."""

    preset: str = 'toy'
    seed: int = 0
    precision: str = 'float64'
    progress: bool = True

    # paths
    data: str = 'data/manifest.tsv'
    out: str = 'runs/latest'

    # model topology
    setting: str = 'full'
    input_h: int = 64
    input_w: int = 32
    channels: Tuple[int, ...] = (32, 64, 128)
    pools: Tuple[int, ...] = (1, 1, 1)
    d: int = 64
    k_p: int = 4
    attn_k: int = 0  # 0 means C/8

    # optimisation
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    epochs: int = 40
    lr_plateau: int = 30
    lr_decay_every: int = 10
    lr_factor: float = 0.1
    checkpoint_every: int = 0

    # objective
    tau: float = 1.0
    epsilon_lsr: float = 0.1
    v: int = 8
    batch: int = 32
    r: int = 10

    # augmentation
    resize_h: int = 72  # 0 means no resize before cropping
    resize_w: int = 36
    hflip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area_lo: float = 0.02
    erase_area_hi: float = 0.4
    erase_aspect_lo: float = 0.3
    erasing_start_epoch: int = 10

    # evaluation and sweeps
    ranks: Tuple[int, ...] = (1, 5, 10)
    sweep_d: Tuple[int, ...] = ()
    sweep_k_p: Tuple[int, ...] = ()

    @property
    def components(self) -> frozenset:
        return SETTINGS[self.setting]

    @property
    def resize_to(self) -> Tuple[int, int]:
        if self.resize_h and self.resize_w:
            return self.resize_h, self.resize_w
        return self.input_h, self.input_w

    @property
    def crop_to(self) -> Tuple[int, int]:
        return self.input_h, self.input_w

    def with_values(self, **values) -> 'RunConfig':
        cfg = replace(self, **values)
        validate(cfg)
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return '\n'.join(lines) + '\n'

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw) -> object:
    if key not in _FIELDS:
        raise ConfigurationError(f"Unknown configuration key '{key}'")
    default = _FIELDS[key].default
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ('true', 'yes', '1', 'on'):
                return True
            if lowered in ('false', 'no', '0', 'off'):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(part) for part in text.split(',') if part.strip())
    except ValueError:
        raise ConfigurationError(f"Invalid value for '{key}': {raw!r}") from None
    return text


def parse_config_text(text: str, source: str = '<config>') -> Dict[str, str]:
    """Parse key = value lines into raw strings; duplicate keys: the last one wins"""
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split('=', 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"{source}:{number}: unknown configuration key '{key}'")
        values[key] = raw
    return values


def parse_overrides(assignments: Iterable[str]) -> Dict[str, str]:
    values = {}
    for item in assignments or ():
        if '=' not in item:
            raise ConfigurationError(f"Override must look like key=value, got {item!r}")
        key, raw = (part.strip() for part in item.split('=', 1))
        values[key] = raw
    return values


def resolve_config(file_values: Optional[Mapping[str, object]] = None,
                   overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """Layer defaults < preset < file < overrides and validate the result"""
    layered = dict(file_values or {})
    layered.update(overrides or {})
    preset = str(layered.get('preset', RunConfig.preset)).strip()
    if preset not in PRESETS:
        raise ConfigurationError(f"Unknown preset '{preset}', expected one of {sorted(PRESETS)}")

    values = {'preset': preset}
    values.update(PRESETS[preset])
    for key, raw in layered.items():
        values[key] = _coerce(key, raw)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    file_values = {}
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigurationError(f"Config file not found: {path}")
        file_values = parse_config_text(config_path.read_text(encoding='utf-8'), source=str(config_path))
    cfg = resolve_config(file_values, overrides)
    logger.debug(f"Resolved config {cfg.fingerprint()[:12]} (preset {cfg.preset}, setting {cfg.setting})")
    return cfg


def write_resolved(cfg: RunConfig, out_dir: str, name: str = RESOLVED_NAME) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(cfg.to_text())
    return path


def feature_extents(input_h: int, input_w: int, pools: Tuple[int, ...], k_p: int) -> Dict[str, Tuple[int, int]]:
    """Spatial extents after each global block; checks that Z1 and Z2 split into k_p parts"""
    extents = {}
    h, w = input_h, input_w
    for level, pool in zip(('Z1', 'Z2', 'Z3'), pools):
        if pool:
            if h % 2 or w % 2:
                raise ConfigurationError(f"Cannot halve a {h}x{w} feature map before {level}")
            h, w = h // 2, w // 2
        extents[level] = (h, w)
    for level in ('Z1', 'Z2'):
        height = extents[level][0]
        if height % k_p:
            raise ConfigurationError(f"Height {height} of {level} is not divisible by k_p={k_p}")
    return extents


def validate(cfg: RunConfig) -> None:
    """Raise ConfigurationError on the first schema violation"""
    def require(condition: bool, message: str):
        if not condition:
            raise ConfigurationError(message)

    require(cfg.preset in PRESETS, f"Unknown preset '{cfg.preset}'")
    require(cfg.precision in ('float64', 'float32'), f"precision must be float64 or float32, got {cfg.precision}")
    require(cfg.setting in SETTINGS, f"setting must be one of {', '.join(SETTING_ORDER)}, got {cfg.setting}")
    require(len(cfg.channels) == 3 and all(c > 0 for c in cfg.channels),
            f"channels needs three positive extents, got {cfg.channels}")
    require(len(cfg.pools) == 3 and all(p in (0, 1) for p in cfg.pools),
            f"pools needs three 0/1 flags, got {cfg.pools}")
    require(cfg.input_h > 0 and cfg.input_w > 0, "input_h and input_w must be positive")
    require(cfg.d > 0 and cfg.k_p > 0, "d and k_p must be positive")
    require(cfg.attn_k >= 0, "attn_k must be >= 0")
    if cfg.attn_k == 0:
        for c in cfg.channels[:2]:
            require(c % 8 == 0, f"Attention channels must be divisible by 8 (K = C/8), got {c}; set attn_k to override")
    feature_extents(cfg.input_h, cfg.input_w, cfg.pools, cfg.k_p)

    require(cfg.lr0 > 0, "lr0 must be positive")
    require(0 <= cfg.beta1 < 1 and 0 <= cfg.beta2 < 1, "beta1 and beta2 must lie in [0, 1)")
    require(cfg.weight_decay >= 0, "weight_decay must be >= 0")
    require(0 < cfg.lr_factor < 1, "lr_factor must lie in (0, 1)")
    require(cfg.epochs >= 1, "epochs must be >= 1")
    require(cfg.lr_plateau >= 0 and cfg.lr_decay_every >= 1, "lr_plateau >= 0 and lr_decay_every >= 1 required")
    require(cfg.checkpoint_every >= 0, "checkpoint_every must be >= 0")

    require(cfg.tau > 0, "tau must be positive")
    require(0 <= cfg.epsilon_lsr < 1, "epsilon_lsr must lie in [0, 1)")
    require(cfg.v >= 1 and cfg.batch >= 1, "v and batch must be >= 1")
    require(cfg.batch % cfg.v == 0, f"batch {cfg.batch} is not divisible by v={cfg.v}")
    require(cfg.r >= 1, "r must be >= 1")

    resize_h, resize_w = cfg.resize_to
    require(cfg.input_h <= resize_h and cfg.input_w <= resize_w,
            f"crop {cfg.input_h}x{cfg.input_w} does not fit inside resize {resize_h}x{resize_w}")
    for key in ('hflip_prob', 'erase_prob'):
        require(0 <= getattr(cfg, key) <= 1, f"{key} must lie in [0, 1]")
    require(0 < cfg.erase_area_lo <= cfg.erase_area_hi <= 1, "need 0 < erase_area_lo <= erase_area_hi <= 1")
    require(0 < cfg.erase_aspect_lo <= 1, "erase_aspect_lo must lie in (0, 1]")
    require(cfg.erasing_start_epoch >= 0, "erasing_start_epoch must be >= 0")

    require(len(cfg.ranks) >= 1 and all(r >= 1 for r in cfg.ranks), "ranks must list positive integers")
    require(all(x > 0 for x in cfg.sweep_d + cfg.sweep_k_p), "sweep values must be positive")


def derive_seed(root: int, tag: str) -> int:
    """Per-component seed: (root + first 4 bytes of SHA-256(tag) as little-endian u32) mod 2**32"""
    digest = hashlib.sha256(tag.encode('utf-8')).digest()
    return (int(root) + int.from_bytes(digest[:4], 'little')) % (2 ** 32)
