import os
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Tuple

from encoder import EncoderConfig
from errors import ConfigError
from stream import SiBlurryConfig

SCENARIO_CONFIG = {
    "num_classes": 10,
    "num_tasks": 5,
    "disjoint_ratio": 0.5,
    "blurry_ratio": 0.1,
    "batch_size": 32,
    "dataset": "synthetic",       # synthetic or idx
    "samples_per_class": 200,
    "separation": 8.0,            # per-chunk class signal must dominate the noise and positions
    "spread": 0.2,
    "test_ratio": 0.2,
    "idx_images": "",
    "idx_labels": "",
}

ENCODER_CONFIG = {
    "depth": 4,
    "hidden_dim": 32,
    "heads": 4,
    "tokens": 9,
    "mlp_ratio": 4.0,
    "chunk_dim": 4,
    "encoder_seed": 0,            # shared by every run seed
    "weights_path": "",
}

ADAPTER_CONFIG = {
    "adapter": "prefix",          # prefix, input, pool or none
    "prompt_length": 4,           # M
    "prompt_layers": 1,           # K
    "pool_size": 10,              # P
    "pool_shared_layers": 1,
    "pool_layers": 2,
    "selection": "similarity",    # similarity, random or fixed
    "pull_weight": 0.5,           # lambda for the key pull loss
}

HEAD_CONFIG = {
    "head": "cosine",             # cosine or linear
    "tau": 0.1,
    "masking": True,
}

TRAIN_CONFIG = {
    "buffer_size": 0,
    "lr": 0.005,
    "eval_interval": 100,
    "seeds": [1, 2, 3, 4, 5],
    "output_dir": "results",
    "quiet": False,
    "scale": "desk",              # desk or full
}

DEFAULTS = {**SCENARIO_CONFIG, **ENCODER_CONFIG, **ADAPTER_CONFIG, **HEAD_CONFIG, **TRAIN_CONFIG}

SCALE_PRESETS = {
    "desk": {"prompt_length": 4, "prompt_layers": 1},
    "full": {"prompt_length": 20, "prompt_layers": 5},
}

ADAPTERS = ("prefix", "input", "pool", "none")
HEADS = ("cosine", "linear")
DATASETS = ("synthetic", "idx")
TRUE_WORDS = ("true", "on", "yes", "1")
FALSE_WORDS = ("false", "off", "no", "0")

THREADS_ENV = "OCLBENCH_THREADS"


@dataclass
class ExperimentConfig:
    num_classes: int = SCENARIO_CONFIG["num_classes"]
    num_tasks: int = SCENARIO_CONFIG["num_tasks"]
    disjoint_ratio: float = SCENARIO_CONFIG["disjoint_ratio"]
    blurry_ratio: float = SCENARIO_CONFIG["blurry_ratio"]
    batch_size: int = SCENARIO_CONFIG["batch_size"]
    dataset: str = SCENARIO_CONFIG["dataset"]
    samples_per_class: int = SCENARIO_CONFIG["samples_per_class"]
    separation: float = SCENARIO_CONFIG["separation"]
    spread: float = SCENARIO_CONFIG["spread"]
    test_ratio: float = SCENARIO_CONFIG["test_ratio"]
    idx_images: str = SCENARIO_CONFIG["idx_images"]
    idx_labels: str = SCENARIO_CONFIG["idx_labels"]

    depth: int = ENCODER_CONFIG["depth"]
    hidden_dim: int = ENCODER_CONFIG["hidden_dim"]
    heads: int = ENCODER_CONFIG["heads"]
    tokens: int = ENCODER_CONFIG["tokens"]
    mlp_ratio: float = ENCODER_CONFIG["mlp_ratio"]
    chunk_dim: int = ENCODER_CONFIG["chunk_dim"]
    encoder_seed: int = ENCODER_CONFIG["encoder_seed"]
    weights_path: str = ENCODER_CONFIG["weights_path"]

    adapter: str = ADAPTER_CONFIG["adapter"]
    prompt_length: int = ADAPTER_CONFIG["prompt_length"]
    prompt_layers: int = ADAPTER_CONFIG["prompt_layers"]
    pool_size: int = ADAPTER_CONFIG["pool_size"]
    pool_shared_layers: int = ADAPTER_CONFIG["pool_shared_layers"]
    pool_layers: int = ADAPTER_CONFIG["pool_layers"]
    selection: str = ADAPTER_CONFIG["selection"]
    pull_weight: float = ADAPTER_CONFIG["pull_weight"]

    head: str = HEAD_CONFIG["head"]
    tau: float = HEAD_CONFIG["tau"]
    masking: bool = HEAD_CONFIG["masking"]

    buffer_size: int = TRAIN_CONFIG["buffer_size"]
    lr: float = TRAIN_CONFIG["lr"]
    eval_interval: int = TRAIN_CONFIG["eval_interval"]
    seeds: List[int] = field(default_factory=lambda: list(TRAIN_CONFIG["seeds"]))
    output_dir: str = TRAIN_CONFIG["output_dir"]
    quiet: bool = TRAIN_CONFIG["quiet"]
    scale: str = TRAIN_CONFIG["scale"]

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            depth=self.depth,
            hidden_dim=self.hidden_dim,
            heads=self.heads,
            tokens=self.tokens,
            mlp_ratio=self.mlp_ratio,
            chunk_dim=self.chunk_dim,
            seed=self.encoder_seed,
        )

    def scenario(self, seed: int = 0) -> SiBlurryConfig:
        return SiBlurryConfig(
            num_classes=self.num_classes,
            num_tasks=self.num_tasks,
            disjoint_ratio=self.disjoint_ratio,
            blurry_ratio=self.blurry_ratio,
            batch_size=self.batch_size,
            seed=seed,
        )

    def validate(self, lines: Optional[Dict[str, int]] = None):
        """Raises ConfigError naming the offending key (and its line when known)"""
        lines = lines or {}
        try:
            self.scenario().validate()
            self.encoder.validate()
            self._check_ranges()
        except ConfigError as e:
            if e.line is None and e.key is not None:
                raise ConfigError(e.message, key=e.key, line=lines.get(e.key, 0)) from None
            raise

    def _check_ranges(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset '{self.dataset}'. Supported: {', '.join(DATASETS)}", key="dataset")
        if self.adapter not in ADAPTERS:
            raise ConfigError(f"unknown adapter '{self.adapter}'. Supported: {', '.join(ADAPTERS)}", key="adapter")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head '{self.head}'. Supported: {', '.join(HEADS)}", key="head")
        if self.selection not in ("similarity", "random", "fixed"):
            raise ConfigError(f"unknown selection '{self.selection}'", key="selection")
        if self.scale not in SCALE_PRESETS:
            raise ConfigError(f"unknown scale '{self.scale}'. Supported: desk, full", key="scale")
        if self.samples_per_class < 0:
            raise ConfigError(f"must be >= 0, got {self.samples_per_class}", key="samples_per_class")
        if self.spread < 0:
            raise ConfigError(f"must be >= 0, got {self.spread}", key="spread")
        if not 0.0 <= self.test_ratio < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.test_ratio}", key="test_ratio")
        if self.prompt_length < 0:
            raise ConfigError(f"must be >= 0, got {self.prompt_length}", key="prompt_length")
        if self.adapter == "prefix" and not 0 <= self.prompt_layers <= self.depth:
            raise ConfigError(f"must lie in 0..depth ({self.depth}), got {self.prompt_layers}", key="prompt_layers")
        if self.adapter == "pool":
            if self.pool_size < 1:
                raise ConfigError(f"must be >= 1, got {self.pool_size}", key="pool_size")
            if self.pool_shared_layers < 0 or self.pool_layers < 0:
                raise ConfigError("pool layer counts must be >= 0", key="pool_layers")
            if self.pool_shared_layers + self.pool_layers > self.depth:
                raise ConfigError(
                    f"{self.pool_shared_layers} shared + {self.pool_layers} pooled blocks exceed depth {self.depth}",
                    key="pool_layers",
                )
        if self.pull_weight < 0:
            raise ConfigError(f"must be >= 0, got {self.pull_weight}", key="pull_weight")
        if self.tau <= 0:
            raise ConfigError(f"must be > 0, got {self.tau}", key="tau")
        if self.buffer_size < 0:
            raise ConfigError(f"must be >= 0, got {self.buffer_size}", key="buffer_size")
        if self.lr <= 0:
            raise ConfigError(f"must be > 0, got {self.lr}", key="lr")
        if self.eval_interval < 1:
            raise ConfigError(f"must be >= 1, got {self.eval_interval}", key="eval_interval")
        if not self.seeds:
            raise ConfigError("at least one seed is required", key="seeds")


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def set_scale(cfg: ExperimentConfig, scale: str, verbose: bool = False) -> ExperimentConfig:
    """Applies a preset: desk (M=4, K=1) or full (M=20, K=5 clipped to the encoder depth)"""
    if scale not in SCALE_PRESETS:
        raise ConfigError(f"unknown scale '{scale}'. Supported: desk, full", key="scale")
    preset = SCALE_PRESETS[scale]
    cfg.scale = scale
    cfg.prompt_length = preset["prompt_length"]
    cfg.prompt_layers = min(preset["prompt_layers"], cfg.depth)
    if verbose:
        print(f"✅ Scale set to {scale}: M={cfg.prompt_length}, K={cfg.prompt_layers}")
    return cfg


def parse_value(key: str, raw: str, line: int = 0):
    kind = FIELD_TYPES[key]
    text = raw.strip()
    try:
        if kind in (bool, "bool"):
            lowered = text.lower()
            if lowered in TRUE_WORDS:
                return True
            if lowered in FALSE_WORDS:
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in (str, "str"):
            return text
        # seeds
        parts = [p for p in text.replace(",", " ").split() if p]
        return [int(p) for p in parts]
    except ValueError:
        expected = getattr(kind, "__name__", str(kind))
        raise ConfigError(f"cannot read '{text}' as {expected}", key=key, line=line) from None


def split_lines(text: str) -> List[Tuple[int, str, str]]:
    """(line number, key, raw value) for every assignment line"""
    entries = []
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError("unknown key", key=key, line=number)
        entries.append((number, key, value))
    return entries


def parse_config(text: str) -> ExperimentConfig:
    """
    Flat `key = value` lines with `#` comments. An empty text gives DEFAULTS.
    A `scale` line applies its preset first; explicit keys override it.
    """
    entries = split_lines(text)
    cfg = ExperimentConfig()
    lines: Dict[str, int] = {}
    for number, key, value in entries:
        if key == "depth":
            cfg.depth = parse_value(key, value, number)
    for number, key, value in entries:
        if key == "scale":
            set_scale(cfg, parse_value(key, value, number))
            lines[key] = number
    for number, key, value in entries:
        if key == "scale":
            continue
        setattr(cfg, key, parse_value(key, value, number))
        lines[key] = number
    cfg.validate(lines)
    return cfg


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def render_config(cfg: ExperimentConfig) -> str:
    """Config text that parses back to `cfg`"""
    out = []
    for name in FIELD_TYPES:
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        out.append(f"{name} = {value}")
    return "\n".join(out) + "\n"


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "1").strip()
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got '{raw}'") from None
    return max(1, threads)


def get_config_summary(cfg: ExperimentConfig) -> str:
    summary = f"Scenario: C={cfg.num_classes}, T={cfg.num_tasks}, disjoint {cfg.disjoint_ratio}, blurry {cfg.blurry_ratio}\n"
    summary += f"Data: {cfg.dataset}"
    if cfg.dataset == "synthetic":
        summary += f" ({cfg.samples_per_class} per class, spread {cfg.spread})"
    summary += "\n"
    summary += f"Encoder: L={cfg.depth}, D={cfg.hidden_dim}, H={cfg.heads}, N={cfg.tokens}\n"

    if cfg.adapter == "pool":
        summary += (f"Adapter: pool P={cfg.pool_size}, M={cfg.prompt_length}, "
                    f"{cfg.selection} selection, lambda={cfg.pull_weight}\n")
    elif cfg.adapter == "none":
        summary += "Adapter: none (head only)\n"
    else:
        summary += f"Adapter: {cfg.adapter} M={cfg.prompt_length}, K={cfg.prompt_layers}\n"

    summary += f"Head: {cfg.head} (tau={cfg.tau}), masking {'on' if cfg.masking else 'off'}\n"
    summary += f"Training: B={cfg.batch_size}, lr={cfg.lr}, buffer={cfg.buffer_size}, eval every {cfg.eval_interval}\n"
    summary += f"Seeds: {', '.join(str(s) for s in cfg.seeds)}\n"
    return summary
