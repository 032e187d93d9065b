"""Run configuration: flat ``key = value`` text files, defaults, validation.

One config format serves both the user-facing CLI files and the text blob
embedded in checkpoints, so a checkpoint alone is enough to reproduce a run.
Floats are written with repr() and therefore round-trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .data import SynthSpec
from .heads import HEADS, MilConfig
from .model import BackboneSpec, backbone_preset, output_geometry
from .preprocessing import AugmentConfig

__all__ = [
    "TrainConfig",
    "USER_KEYS",
    "SYNTH_KEYS",
    "parse_flat",
    "train_config_from_items",
    "parse_config_file",
    "run_config_text",
    "parse_run_config",
    "parse_synth_file",
    "config_help",
    "synth_help",
]


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the data itself."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    k_grid: tuple[int, ...] = (4, 8, 12, 16)
    backbone: BackboneSpec = field(default_factory=lambda: backbone_preset("desk"))
    mil: MilConfig = field(default_factory=MilConfig)
    preprocess: str = "resize"
    augment_enabled: bool = True
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    finetune_learning_rate: float = 5e-5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"lr must be positive, got {self.learning_rate}")
        if self.finetune_learning_rate <= 0:
            raise ValueError(
                f"finetune_lr must be positive, got {self.finetune_learning_rate}"
            )
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch_size}")
        for nm, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 < b < 1.0:
                raise ValueError(f"{nm} must be in (0, 1), got {b}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not self.k_grid or any(k < 1 for k in self.k_grid):
            raise ValueError(f"k_grid needs positive entries, got {self.k_grid}")
        object.__setattr__(self, "k_grid", tuple(sorted(set(self.k_grid))))
        if self.preprocess not in ("resize", "full"):
            raise ValueError(
                f"preprocess must be 'resize' or 'full', got {self.preprocess!r}"
            )
        _, gh, gw = output_geometry(self.backbone)
        m = gh * gw
        if self.mil.m is None:
            object.__setattr__(self, "mil", replace(self.mil, m=m))
        elif self.mil.m != m:
            raise ValueError(
                f"mil.m={self.mil.m} does not match backbone patch count {m}"
            )


# key -> (one-line doc, applies-to note used in validation errors)
USER_KEYS: dict[str, str] = {
    "head": "loss head: max_pool | label_assign | sparse (default max_pool)",
    "k": "patches assigned the bag label; label_assign head only (default 4)",
    "k_grid": "comma-separated k candidates for select-k; label_assign only",
    "mu": "L1 response-sparsity weight; sparse head only (default 1e-05)",
    "lambda": "L2 weight-decay coefficient (default 1e-05)",
    "weight_mode": "class weighting: balanced | literal (default balanced)",
    "lr": "Adam learning rate (default 0.001)",
    "beta1": "Adam first-moment decay (default 0.9)",
    "beta2": "Adam second-moment decay (default 0.999)",
    "eps": "Adam denominator stabilizer (default 1e-08)",
    "epochs": "training epochs (default 50)",
    "batch": "minibatch size in bags (default 8)",
    "seed": "root seed for init/shuffle/augment streams (default 0)",
    "preset": "backbone preset: desk | paper (default desk)",
    "backbone": "explicit backbone layer string; mutually exclusive with preset",
    "preprocess": "input pipeline: resize | full = Otsu crop then resize",
    "augment": "training-time augmentation: on | off (default on)",
    "flip_prob": "horizontal flip probability (default 0.5)",
    "shift_frac": "max translation as a fraction of image side (default 0.1)",
    "rotate_deg_max": "max rotation magnitude in degrees (default 45)",
    "cutout_frac": "cutout square side fraction (default 50/224)",
    "finetune_lr": "learning rate used when resuming a checkpoint (default 5e-05)",
}

SYNTH_KEYS: dict[str, str] = {
    "image_size": "square image side in pixels (default 64)",
    "n_pos": "number of positive images (default 40)",
    "n_neg": "number of negative images (default 160)",
    "mass_frac": "planted square side / image side (default 0.14)",
    "intensity_lift": "guaranteed in-box vs background mean gap (default 0.2)",
    "noise_level": "background noise sigma (default 0.02)",
    "seed": "generator seed (default 7)",
}


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    items: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ValueError(f"{source}:{lineno}: empty key or value")
        if key in items:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        items[key] = value
    return items


def _as_int(key: str, s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ValueError(f"config key {key!r}: expected an integer, got {s!r}") from None


def _as_float(key: str, s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ValueError(f"config key {key!r}: expected a number, got {s!r}") from None


def _as_switch(key: str, s: str) -> bool:
    if s == "on":
        return True
    if s == "off":
        return False
    raise ValueError(f"config key {key!r}: expected 'on' or 'off', got {s!r}")


def train_config_from_items(
    items: dict[str, str], source: str = "<config>", strict: bool = True
) -> TrainConfig:
    """Build a validated TrainConfig from parsed key/value strings.

    strict mode (user files) rejects unknown keys and head/key mismatches
    before any compute; non-strict mode is for checkpoint blobs, which store
    every field regardless of head.
    """
    if strict:
        for key in items:
            if key not in USER_KEYS:
                raise ValueError(
                    f"{source}: unknown config key {key!r}; "
                    f"documented keys: {', '.join(USER_KEYS)}"
                )
    head = items.get("head", "max_pool")
    if head not in HEADS:
        raise ValueError(f"{source}: unknown head {head!r}; choose from {HEADS}")
    if strict:
        if head != "label_assign":
            for key in ("k", "k_grid"):
                if key in items:
                    raise ValueError(
                        f"{source}: {key!r} applies to the label_assign head only "
                        f"(head = {head})"
                    )
        if head != "sparse" and "mu" in items:
            raise ValueError(
                f"{source}: 'mu' applies to the sparse head only (head = {head})"
            )
        if "preset" in items and "backbone" in items:
            raise ValueError(f"{source}: set 'preset' or 'backbone', not both")
    if "backbone" in items:
        backbone = BackboneSpec.parse(items["backbone"])
    else:
        backbone = backbone_preset(items.get("preset", "desk"))
    mil_kwargs = dict(
        head=head,
        weight_mode=items.get("weight_mode", "balanced"),
    )
    if "k" in items:
        mil_kwargs["k"] = _as_int("k", items["k"])
    if "mu" in items:
        mil_kwargs["mu"] = _as_float("mu", items["mu"])
    if "lambda" in items:
        mil_kwargs["lam"] = _as_float("lambda", items["lambda"])
    mil = MilConfig(**mil_kwargs)
    kwargs: dict = {"backbone": backbone, "mil": mil}
    if "lr" in items:
        kwargs["learning_rate"] = _as_float("lr", items["lr"])
    if "beta1" in items:
        kwargs["beta1"] = _as_float("beta1", items["beta1"])
    if "beta2" in items:
        kwargs["beta2"] = _as_float("beta2", items["beta2"])
    if "eps" in items:
        kwargs["eps"] = _as_float("eps", items["eps"])
    if "epochs" in items:
        kwargs["epochs"] = _as_int("epochs", items["epochs"])
    if "batch" in items:
        kwargs["batch_size"] = _as_int("batch", items["batch"])
    if "seed" in items:
        kwargs["seed"] = _as_int("seed", items["seed"])
    if "k_grid" in items:
        try:
            grid = tuple(int(part) for part in items["k_grid"].split(","))
        except ValueError:
            raise ValueError(
                f"config key 'k_grid': expected comma-separated integers, "
                f"got {items['k_grid']!r}"
            ) from None
        kwargs["k_grid"] = grid
    if "preprocess" in items:
        kwargs["preprocess"] = items["preprocess"]
    if "augment" in items:
        kwargs["augment_enabled"] = _as_switch("augment", items["augment"])
    aug_kwargs = {}
    for key, fld in (
        ("flip_prob", "flip_prob"),
        ("shift_frac", "shift_frac"),
        ("rotate_deg_max", "rotate_deg_max"),
        ("cutout_frac", "cutout_frac"),
    ):
        if key in items:
            aug_kwargs[fld] = _as_float(key, items[key])
    if aug_kwargs:
        kwargs["aug"] = AugmentConfig(**aug_kwargs)
    if "finetune_lr" in items:
        kwargs["finetune_learning_rate"] = _as_float("finetune_lr", items["finetune_lr"])
    return TrainConfig(**kwargs)


def parse_config_file(path: str) -> tuple[TrainConfig, dict[str, str]]:
    """Read a user config file; returns the config plus the raw keys that
    were explicitly set (so callers can tell defaults from choices)."""
    with open(path, "r", encoding="utf-8") as f:
        items = parse_flat(f.read(), source=path)
    return train_config_from_items(items, source=path), items


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_config_text(cfg: TrainConfig, step: int) -> str:
    """Canonical config blob stored in checkpoints: every field, fixed order."""
    pairs = [
        ("backbone", cfg.backbone.describe()),
        ("head", cfg.mil.head),
        ("k", cfg.mil.k),
        ("mu", cfg.mil.mu),
        ("lambda", cfg.mil.lam),
        ("weight_mode", cfg.mil.weight_mode),
        ("lr", cfg.learning_rate),
        ("beta1", cfg.beta1),
        ("beta2", cfg.beta2),
        ("eps", cfg.eps),
        ("epochs", cfg.epochs),
        ("batch", cfg.batch_size),
        ("seed", cfg.seed),
        ("k_grid", ",".join(str(k) for k in cfg.k_grid)),
        ("preprocess", cfg.preprocess),
        ("augment", cfg.augment_enabled),
        ("flip_prob", cfg.aug.flip_prob),
        ("shift_frac", cfg.aug.shift_frac),
        ("rotate_deg_max", cfg.aug.rotate_deg_max),
        ("cutout_frac", cfg.aug.cutout_frac),
        ("finetune_lr", cfg.finetune_learning_rate),
        ("step", step),
    ]
    return "".join(f"{key} = {_fmt(value)}\n" for key, value in pairs)


def parse_run_config(text: str) -> tuple[TrainConfig, int]:
    """Inverse of run_config_text; returns (config, step)."""
    items = parse_flat(text, source="<checkpoint>")
    step = _as_int("step", items.pop("step", "0"))
    if step < 0:
        raise ValueError(f"checkpoint step must be nonnegative, got {step}")
    cfg = train_config_from_items(items, source="<checkpoint>", strict=False)
    return cfg, step


def parse_synth_file(path: str) -> SynthSpec:
    with open(path, "r", encoding="utf-8") as f:
        items = parse_flat(f.read(), source=path)
    for key in items:
        if key not in SYNTH_KEYS:
            raise ValueError(
                f"{path}: unknown synth key {key!r}; "
                f"documented keys: {', '.join(SYNTH_KEYS)}"
            )
    kwargs: dict = {}
    for key in ("image_size", "n_pos", "n_neg", "seed"):
        if key in items:
            kwargs[key] = _as_int(key, items[key])
    for key in ("mass_frac", "intensity_lift", "noise_level"):
        if key in items:
            kwargs[key] = _as_float(key, items[key])
    return SynthSpec(**kwargs)


def _render_keys(keys: dict[str, str]) -> str:
    width = max(len(k) for k in keys)
    return "\n".join(f"  {k.ljust(width)}  {doc}" for k, doc in keys.items())


def config_help() -> str:
    return "config file keys (flat 'key = value' lines):\n" + _render_keys(USER_KEYS)


def synth_help() -> str:
    return "synth spec keys (flat 'key = value' lines):\n" + _render_keys(SYNTH_KEYS)
