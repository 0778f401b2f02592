"""Line-oriented experiment config: ``[section]`` headers and ``key = value`` lines.

Keys are unique across sections, so a key may also appear before any header.
Unknown keys raise ParseError with the line number; values failing validation
raise ValidationError naming the field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentPolicy
from .errors import InvalidConfig, ParseError, ValidationError
from .losses import LossWeights
from .trainer import Ablation, TrainConfig

ABLATION_FLAGS = ("disable_flat", "disable_wide_kl", "disable_psl", "disable_psa", "disable_ball", "disable_mas",
                  "disable_clamp")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"            # blobs | images
    n_classes: int = 21
    dim: int = 16
    samples_per_class: int = 100
    class_sep: float = 6.0
    cluster_std: float = 1.0
    image_side: int = 16
    noise_std: float = 0.3


@dataclass(frozen=True)
class SplitConfig:
    base_classes: int = 12
    ways: int = 3
    shots: int = 5
    n_fewshot_tasks: int = 3
    anchor_budget_base: int = 25
    test_fraction: float = 0.2


@dataclass(frozen=True)
class NetworkConfig:
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    projected_dim: int = 16
    extractor: str = "auto"        # auto | mlp | conv


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/default"

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def with_ablation(self, ablation: Ablation) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, ablation=ablation))

    def echo(self) -> dict:
        """Plain-JSON view of every experiment setting, used in metrics.json.

        The output directory is left out so that the same experiment written
        to two places yields byte-identical metrics.
        """
        out = _plain(dataclasses.asdict(self))
        out.pop("out_dir", None)
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# value converters

def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.replace(" ", "").split(",") if p)


def _opt_int(s: str) -> int | None:
    return None if s.lower() in ("none", "auto", "") else int(s)


# key -> (section, converter)
SCHEMA: dict[str, tuple[str, object]] = {
    **{k: ("dataset", c) for k, c in [
        ("kind", str), ("n_classes", int), ("dim", int), ("samples_per_class", int), ("class_sep", float),
        ("cluster_std", float), ("image_side", int), ("noise_std", float)]},
    **{k: ("split", c) for k, c in [
        ("base_classes", int), ("ways", int), ("shots", int), ("n_fewshot_tasks", int),
        ("anchor_budget_base", int), ("test_fraction", float)]},
    **{k: ("network", c) for k, c in [
        ("hidden_dims", _ints), ("feature_dim", int), ("projected_dim", int), ("extractor", str)]},
    **{k: ("train", c) for k, c in [
        ("epochs_base", int), ("epochs_fewshot", int), ("batch_size", int), ("lr_base", float),
        ("lr_fewshot_max", float), ("lr_fewshot_min", float), ("bound_b", float), ("m_perturbations", int),
        ("s_synthetic", _opt_int), ("momentum_m", float), ("sgd_momentum", float), ("weight_decay", float),
        ("kmeans_restarts_base", int), ("kmeans_restarts_fewshot", int)]},
    **{k: ("loss", float) for k in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "tau", "sigma_psa",
                                     "margin_r")},
    **{k: ("augment", c) for k, c in [
        ("jitter_std", float), ("scale_range", _floats), ("flip_prob", float)]},
    **{k: ("ablation", _bool) for k in ABLATION_FLAGS},
    **{k: ("run", c) for k, c in [("seeds", _ints), ("out_dir", str)]},
}

SECTIONS = sorted({s for s, _ in SCHEMA.values()})


def parse_text(text: str) -> dict[str, object]:
    """Tokenise config text into ``{key: converted value}``; structural errors only."""
    values: dict[str, object] = {}
    seen_at: dict[str, int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"unterminated section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ParseError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ParseError(f"unknown key {key!r}", lineno)
        want, conv = SCHEMA[key]
        if section is not None and section != want:
            raise ParseError(f"key {key!r} belongs in [{want}], found in [{section}]", lineno)
        if key in seen_at:
            raise ParseError(f"duplicate key {key!r} (first set on line {seen_at[key]})", lineno)
        try:
            values[key] = conv(value)
        except ValueError as exc:
            raise ValidationError(key, f"cannot read {value!r}: {exc}") from None
        seen_at[key] = lineno
    return values


def build(values: dict[str, object]) -> RunConfig:
    """Assemble and validate a RunConfig from parsed key/value pairs."""
    def pick(section):
        return {k: v for k, v in values.items() if SCHEMA[k][0] == section}

    dataset = DatasetConfig(**pick("dataset"))
    if dataset.kind not in ("blobs", "images"):
        raise ValidationError("kind", "must be 'blobs' or 'images'")
    for name in ("n_classes", "dim", "samples_per_class", "image_side"):
        if getattr(dataset, name) < (2 if name in ("n_classes", "dim") else 1):
            raise ValidationError(name, "too small")
    if dataset.class_sep <= 0:
        raise ValidationError("class_sep", "must be positive")
    if dataset.cluster_std < 0 or dataset.noise_std < 0:
        raise ValidationError("cluster_std" if dataset.cluster_std < 0 else "noise_std", "must be non-negative")

    split = SplitConfig(**pick("split"))
    for name in ("base_classes", "shots", "anchor_budget_base"):
        if getattr(split, name) < 1:
            raise ValidationError(name, "must be >= 1")
    if split.ways < 1 or split.n_fewshot_tasks < 0:
        raise ValidationError("ways" if split.ways < 1 else "n_fewshot_tasks", "out of range")
    if not 0 <= split.test_fraction < 1:
        raise ValidationError("test_fraction", "must lie in [0, 1)")
    if split.base_classes + split.ways * split.n_fewshot_tasks > dataset.n_classes:
        raise ValidationError("n_classes", "split needs more classes than the dataset has")

    network = NetworkConfig(**pick("network"))
    if network.extractor not in ("auto", "mlp", "conv"):
        raise ValidationError("extractor", "must be auto, mlp or conv")
    if not network.hidden_dims or min(network.hidden_dims) < 1:
        raise ValidationError("hidden_dims", "need at least one positive width")
    if network.feature_dim < 1:
        raise ValidationError("feature_dim", "must be >= 1")
    if network.projected_dim < 2:
        raise ValidationError("projected_dim", "must be >= 2")

    weights = LossWeights(**pick("loss"))
    aug_kw = pick("augment")
    try:
        augment = AugmentPolicy(**aug_kw)
    except InvalidConfig as exc:
        bad = "scale_range" if "scale" in str(exc) else "flip_prob" if "flip" in str(exc) else "jitter_std"
        raise ValidationError(bad, str(exc)) from None
    if "scale_range" in aug_kw and len(aug_kw["scale_range"]) != 2:
        raise ValidationError("scale_range", "needs exactly two numbers")
    ablation = Ablation(**pick("ablation"))
    train = TrainConfig(**pick("train"), weights=weights, augment=augment, ablation=ablation)

    run = pick("run")
    seeds = run.get("seeds", (0,))
    if not seeds:
        raise ValidationError("seeds", "at least one seed is required")
    return RunConfig(dataset, split, network, train, tuple(seeds), run.get("out_dir", "runs/default"))


def parse_config(path: str | Path) -> RunConfig:
    return build(parse_text(Path(path).read_text()))


def default_config() -> RunConfig:
    return build({})
