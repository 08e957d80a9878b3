"""Plain-text `key = value` configuration with dotted sections.

One flat namespace ("balance.cap", "mixup.alpha", "train.lr", ...) maps
onto the per-stage dataclass configs. Defaults are the published pipeline
constants; the SEDPIPE_SEED environment variable and command-line
`--set key=value` overrides take precedence over the file.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from sedpipe.corpus import DEFAULT_CLASSES, Vocabulary
from sedpipe.decode import DecodeConfig
from sedpipe.evaluation import CollarSpec
from sedpipe.features import FeatureConfig
from sedpipe.model import ConvBlock, ModelConfig, TrainConfig
from sedpipe.pseudolabel import TierThresholds
from sedpipe.sampling import MixupConfig
from sedpipe.tune import DEFAULT_GRID

SEED_ENV_VAR = "SEDPIPE_SEED"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment; blanks ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        out[key] = value.strip()
    return out


def render_config_text(mapping: dict[str, str]) -> str:
    return "\n".join(f"{k} = {mapping[k]}" for k in sorted(mapping)) + "\n"


def config_hash(mapping: dict[str, str]) -> str:
    return hashlib.sha256(render_config_text(mapping).encode("utf-8")).hexdigest()


def _get_bool(raw: dict[str, str], key: str, default: bool) -> bool:
    if key not in raw:
        return default
    value = raw[key].lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"config key {key}: expected a boolean, got {raw[key]!r}")


def _get_float(raw: dict[str, str], key: str, default: float) -> float:
    return float(raw[key]) if key in raw else default


def _get_int(raw: dict[str, str], key: str, default: int) -> int:
    return int(raw[key]) if key in raw else default


def parse_conv_blocks(text: str) -> tuple[ConvBlock, ...]:
    """Parse `16x2x1,32x2x1` style block lists (channels x freq_pool x time_pool)."""
    blocks = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        dims = chunk.split("x")
        if len(dims) not in (2, 3):
            raise ValueError(f"bad conv block spec {chunk!r}")
        out_ch, freq_pool = int(dims[0]), int(dims[1])
        time_pool = int(dims[2]) if len(dims) == 3 else 1
        blocks.append(ConvBlock(out_ch, freq_pool, time_pool))
    return tuple(blocks)


def render_conv_blocks(blocks: tuple[ConvBlock, ...]) -> str:
    return ",".join(f"{b.out_channels}x{b.freq_pool}x{b.time_pool}" for b in blocks)


@dataclass
class PipelineConfig:
    """Everything one run needs: paths, stage configs, and the seed."""

    seed: int = 0
    vocab: Vocabulary = field(default_factory=Vocabulary)
    paths: dict[str, str] = field(default_factory=dict)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    tiers: TierThresholds = field(default_factory=TierThresholds)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    collar: CollarSpec = field(default_factory=CollarSpec)
    tune_grid: tuple[float, ...] = DEFAULT_GRID
    raw: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "PipelineConfig":
        seed = _get_int(raw, "seed", 0)
        if os.environ.get(SEED_ENV_VAR):
            seed = int(os.environ[SEED_ENV_VAR])

        classes = (
            tuple(c.strip() for c in raw["classes"].split(",") if c.strip())
            if "classes" in raw
            else DEFAULT_CLASSES
        )
        vocab = Vocabulary(classes)

        paths = {
            key.split(".", 1)[1]: value
            for key, value in raw.items()
            if key.startswith("paths.")
        }

        fmax_raw = raw.get("features.fmax", "")
        features = FeatureConfig(
            target_sr=_get_int(raw, "features.target_sr", 22050),
            n_fft=_get_int(raw, "features.n_fft", 2048),
            hop=_get_int(raw, "features.hop", 684),
            n_mels=_get_int(raw, "features.n_mels", 128),
            fmin=_get_float(raw, "features.fmin", 0.0),
            fmax=float(fmax_raw) if fmax_raw else None,
            log_floor=_get_float(raw, "features.log_floor", 1e-10),
            delta_window=_get_int(raw, "features.delta_window", 2),
        )
        tiers = TierThresholds(
            t1=_get_float(raw, "tiers.t1", 0.99),
            t2=_get_float(raw, "tiers.t2", 0.47),
            t3=_get_float(raw, "tiers.t3", 0.28),
        )
        tf_raw = raw.get("model.target_frames", "160")
        model = ModelConfig(
            n_mels=features.n_mels,
            conv_blocks=parse_conv_blocks(
                raw.get("model.conv_blocks", "16x2x1,32x2x1,32x2x1")
            ),
            conv1d_channels=_get_int(raw, "model.conv1d_channels", 64),
            conv1d_kernel=_get_int(raw, "model.conv1d_kernel", 3),
            rnn_hidden=_get_int(raw, "model.rnn_hidden", 32),
            gated_dim=_get_int(raw, "model.gated_dim", 64),
            n_classes=len(vocab),
            target_frames=None if tf_raw.lower() in ("", "none") else int(tf_raw),
        )
        patience_raw = raw.get("train.patience", "7")
        mixup_cfg = MixupConfig(
            alpha=_get_float(raw, "mixup.alpha", 0.2),
            enabled=_get_bool(raw, "mixup.enabled", True),
        )
        train = TrainConfig(
            lr=_get_float(raw, "train.lr", 0.001),
            batch_size=_get_int(raw, "train.batch_size", 20),
            max_epochs=_get_int(raw, "train.max_epochs", 50),
            early_stop_patience=(
                None if patience_raw.lower() in ("", "none") else int(patience_raw)
            ),
            seed=seed,
            use_class_weights=_get_bool(raw, "train.use_class_weights", False),
            mixup=mixup_cfg,
            balance_cap=_get_float(raw, "balance.cap", 6.0),
            use_balance=_get_bool(raw, "balance.enabled", True),
        )
        decode_cfg = DecodeConfig(
            median_window=_get_int(raw, "decode.median_window", 1),
            min_event_dur=_get_float(raw, "decode.min_event_dur", 0.0),
            min_gap=_get_float(raw, "decode.min_gap", 0.0),
        )
        collar = CollarSpec(
            onset_collar=_get_float(raw, "collar.onset", 0.200),
            offset_collar_abs=_get_float(raw, "collar.offset_abs", 0.200),
            offset_collar_rel=_get_float(raw, "collar.offset_rel", 0.20),
        )
        if "tune.grid" in raw:
            grid = tuple(float(v) for v in raw["tune.grid"].split(",") if v.strip())
        else:
            grid = DEFAULT_GRID
        return cls(
            seed=seed,
            vocab=vocab,
            paths=paths,
            features=features,
            tiers=tiers,
            model=model,
            train=train,
            decode=decode_cfg,
            collar=collar,
            tune_grid=grid,
            raw=dict(raw),
        )

    @classmethod
    def load(
        cls, path: str | Path | None = None, overrides: list[str] | None = None
    ) -> "PipelineConfig":
        raw: dict[str, str] = {}
        if path is not None:
            raw.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        for item in overrides or []:
            if "=" not in item:
                raise ValueError(f"override {item!r} must be key=value")
            key, value = item.split("=", 1)
            raw[key.strip()] = value.strip()
        return cls.from_mapping(raw)

    def hash(self) -> str:
        return config_hash(self.raw)


# ---------------------------------------------------------------------------
# model-config sidecar for checkpoints

def render_model_config(cfg: ModelConfig) -> str:
    mapping = {
        "n_mels": str(cfg.n_mels),
        "in_channels": str(cfg.in_channels),
        "conv_blocks": render_conv_blocks(cfg.conv_blocks),
        "conv1d_channels": str(cfg.conv1d_channels),
        "conv1d_kernel": str(cfg.conv1d_kernel),
        "rnn_hidden": str(cfg.rnn_hidden),
        "gated_dim": str(cfg.gated_dim),
        "n_classes": str(cfg.n_classes),
        "target_frames": "none" if cfg.target_frames is None else str(cfg.target_frames),
    }
    return render_config_text(mapping)


def parse_model_config(text: str) -> ModelConfig:
    raw = parse_config_text(text)
    tf = raw.get("target_frames", "none")
    return ModelConfig(
        n_mels=int(raw["n_mels"]),
        in_channels=int(raw.get("in_channels", "3")),
        conv_blocks=parse_conv_blocks(raw["conv_blocks"]),
        conv1d_channels=int(raw["conv1d_channels"]),
        conv1d_kernel=int(raw["conv1d_kernel"]),
        rnn_hidden=int(raw["rnn_hidden"]),
        gated_dim=int(raw["gated_dim"]),
        n_classes=int(raw["n_classes"]),
        target_frames=None if tf.lower() == "none" else int(tf),
    )
