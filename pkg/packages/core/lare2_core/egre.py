"""
Error-guided refinement of backbone features and the binary detector built
on it.

The aligned error map biases a single-query multi-head attention over the
feature map (spatial refinement) and gates the pooled feature channel-wise
(channel refinement). The refined vectors are concatenated with the pooled
feature and scored by a linear head.
"""

import copy
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
try:
    from typing import override
except ImportError:  # Python < 3.12
    from typing_extensions import override

import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import TensorDataset

from .backbone import Backbone, FeatureBundle
from .checkpoint import (
    load_module_records,
    meta_int,
    meta_records,
    module_records,
    read_checkpoint,
    write_checkpoint,
)
from .config import DetectorMode, Stage, TrainConfig
from .errors import DataError, NumericError, ParameterError, ShapeError
from .images import load_images
from .lare import LaREMap, gather_maps
from .manifest import DatasetManifest
from .metrics import ScoredSet, accuracy
from .training import (
    TrainingRun,
    build_optimizer,
    deterministic_algorithms,
    ensure_finite_loss,
    init_module,
    seeded_loader,
)

logger = logging.getLogger(__name__)

MODES = tuple(DetectorMode)
DETECTOR_NAMESPACE = "detector"
ERROR_INIT_SCALE = 0.1


################################################################################
# Alignment
################################################################################
@dataclass(frozen=True, eq=False)
class AlignedError:
    spatial: torch.Tensor  # (..., h*w, C2)
    pooled: torch.Tensor  # (..., C2)


def align(lare: LaREMap | torch.Tensor, target_h: int, target_w: int) -> AlignedError:
    """Adaptive average pooling of a (C, H, W) or (N, C, H, W) error map onto the feature grid."""
    values = lare.values if isinstance(lare, LaREMap) else lare
    height, width = values.shape[-2:]
    if target_h < 1 or target_w < 1:
        raise ParameterError(f"target grid must be at least 1x1, got {target_h}x{target_w}")
    if target_h > height or target_w > width:
        raise ParameterError(
            f"cannot align a {height}x{width} map up to {target_h}x{target_w}"
        )

    pooled_map = F.adaptive_avg_pool2d(values, (target_h, target_w))
    spatial = pooled_map.flatten(-2).transpose(-1, -2)
    return AlignedError(spatial=spatial, pooled=spatial.mean(dim=-2))


################################################################################
# Attention
################################################################################
def esa(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, e_bias: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d) + E) V over the key axis; leading dims broadcast."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"inconsistent attention shapes q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}")
    if e_bias.shape[-2:] != (q.shape[-2], k.shape[-2]):
        raise ShapeError(f"bias shape {tuple(e_bias.shape)} does not match ({q.shape[-2]}, {k.shape[-2]})")

    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]) + e_bias
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite attention logits")
    # torch.softmax subtracts the row max before exponentiating.
    return torch.softmax(logits, dim=-1) @ v


def mhesa(
    q: torch.Tensor,
    kv: torch.Tensor,
    err: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_e: torch.Tensor,
    w_o: torch.Tensor,
) -> torch.Tensor:
    """
    Multi-head error-guided attention.

    q: (..., n_q, C1), kv: (..., n, C1), err: (..., n, C2)
    w_q, w_k, w_v: (h, C1, d), w_e: (h, C2), w_o: (h*d, C1)
    """
    if kv.shape[-2] != err.shape[-2]:
        raise ShapeError(f"{kv.shape[-2]} feature rows but {err.shape[-2]} error rows")
    if err.shape[-1] != w_e.shape[-1] or kv.shape[-1] != w_k.shape[1] or q.shape[-1] != w_q.shape[1]:
        raise ShapeError("projection shapes do not match the inputs")

    queries = torch.einsum("...qc,hcd->...hqd", q, w_q)
    keys = torch.einsum("...nc,hcd->...hnd", kv, w_k)
    values = torch.einsum("...nc,hcd->...hnd", kv, w_v)
    bias = torch.einsum("...nc,hc->...hn", err, w_e).unsqueeze(-2).expand(*queries.shape[:-1], keys.shape[-2])

    heads = esa(queries, keys, values, bias)
    concatenated = heads.transpose(-3, -2).flatten(-2)
    return concatenated @ w_o


class ErrorGuidedRefinement(nn.Module):
    """Refinement parameters for one detector mode, plus the classification head."""

    def __init__(
        self,
        mode: DetectorMode = DetectorMode.EGRE,
        feature_channels: int = 32,
        error_channels: int = 4,
        heads: int = 4,
        head_dim: int = 8,
    ):
        super().__init__()
        self.mode = mode
        self.feature_channels = feature_channels
        self.error_channels = error_channels
        self.heads = heads
        self.head_dim = head_dim

        if self.uses_attention:
            scale = 1.0 / math.sqrt(feature_channels)
            self.w_q = nn.Parameter(torch.randn(heads, feature_channels, head_dim) * scale)
            self.w_k = nn.Parameter(torch.randn(heads, feature_channels, head_dim) * scale)
            self.w_v = nn.Parameter(torch.randn(heads, feature_channels, head_dim) * scale)
            # Error projections start near zero.
            self.w_e = nn.Parameter(torch.randn(heads, error_channels) * ERROR_INIT_SCALE)
            self.w_o = nn.Parameter(torch.randn(heads * head_dim, feature_channels) / math.sqrt(heads * head_dim))
        if self.uses_gate:
            self.gate = nn.Parameter(torch.randn(error_channels, feature_channels) * ERROR_INIT_SCALE)

        self.head = nn.Linear(self.feature_dim, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def uses_attention(self) -> bool:
        return self.mode in (DetectorMode.ESR, DetectorMode.EGRE)

    @property
    def uses_gate(self) -> bool:
        return self.mode in (DetectorMode.ECR, DetectorMode.EGRE)

    @property
    def feature_dim(self) -> int:
        match self.mode:
            case DetectorMode.BASELINE | DetectorMode.LARE_ONLY:
                return self.feature_channels
            case DetectorMode.ESR | DetectorMode.ECR:
                return 2 * self.feature_channels
            case DetectorMode.EGRE:
                return 3 * self.feature_channels
            case DetectorMode.CONCAT:
                return self.feature_channels + self.error_channels

    @override
    def forward(self, bundle: FeatureBundle, aligned: AlignedError | None) -> torch.Tensor:
        parts: list[torch.Tensor] = []
        if self.uses_attention:
            parts.append(spatial_refine(bundle, _require(aligned), self))
        if self.uses_gate:
            parts.append(channel_refine(bundle, _require(aligned), self))
        parts.append(bundle.global_feat)
        if self.mode is DetectorMode.CONCAT:
            # Concatenating on the channel axis before pooling equals appending the pooled error.
            parts.append(_require(aligned).pooled)
        return self.head(torch.cat(parts, dim=-1)).squeeze(-1)


def _require(aligned: AlignedError | None) -> AlignedError:
    if aligned is None:
        raise ParameterError("this detector mode needs an error map")
    return aligned


def spatial_refine(bundle: FeatureBundle, aligned: AlignedError, params: ErrorGuidedRefinement) -> torch.Tensor:
    if aligned.spatial.shape[-2] != bundle.spatial.shape[-2]:
        raise ShapeError(
            f"error map has {aligned.spatial.shape[-2]} rows, feature map has {bundle.spatial.shape[-2]}"
        )
    query = bundle.global_feat.unsqueeze(-2)
    refined = mhesa(
        query, bundle.spatial, aligned.spatial, params.w_q, params.w_k, params.w_v, params.w_e, params.w_o
    )
    return refined.squeeze(-2)


def channel_refine(bundle: FeatureBundle, aligned: AlignedError, params: ErrorGuidedRefinement) -> torch.Tensor:
    if aligned.pooled.shape[-1] != params.gate.shape[0]:
        raise ShapeError(f"pooled error has {aligned.pooled.shape[-1]} channels, gate expects {params.gate.shape[0]}")
    return torch.sigmoid(aligned.pooled @ params.gate) * bundle.global_feat


def fuse_and_classify(
    x_s: torch.Tensor, x_c: torch.Tensor, bundle: FeatureBundle, params: ErrorGuidedRefinement
) -> torch.Tensor:
    if not x_s.shape[-1] == x_c.shape[-1] == bundle.global_feat.shape[-1]:
        raise ShapeError("refined vectors and pooled feature differ in length")
    return params.head(torch.cat([x_s, x_c, bundle.global_feat], dim=-1)).squeeze(-1)


################################################################################
# Detector
################################################################################
class Detector(nn.Module):
    def __init__(
        self,
        mode: DetectorMode = DetectorMode.EGRE,
        image_channels: int = 1,
        latent_channels: int = 4,
        feature_channels: int = 32,
        heads: int = 4,
        head_dim: int = 8,
        input_size: int = 64,
    ):
        super().__init__()
        self.mode = mode
        self.image_channels = image_channels
        self.latent_channels = latent_channels
        self.backbone = Backbone(
            in_channels=latent_channels if mode is DetectorMode.LARE_ONLY else image_channels,
            channels=feature_channels,
            input_size=input_size,
        )
        self.egre = ErrorGuidedRefinement(mode, feature_channels, latent_channels, heads, head_dim)

        # Per-channel affine applied to error maps, stored as top-level checkpoint records.
        self.register_buffer("error_mean", torch.zeros(latent_channels), persistent=False)
        self.register_buffer("error_std", torch.ones(latent_channels), persistent=False)

    @property
    def uses_error_map(self) -> bool:
        return self.mode is not DetectorMode.BASELINE

    @torch.no_grad()
    def fit_error_scaling(self, error_maps: torch.Tensor) -> None:
        """
        Center and scale each error channel by the spread of per-image means
        over the training maps.
        """
        if error_maps.dim() != 4 or error_maps.shape[1] != self.latent_channels:
            raise ShapeError(f"expected (N, {self.latent_channels}, h, w) error maps, got {tuple(error_maps.shape)}")
        image_means = error_maps.mean(dim=(2, 3))
        self.error_mean = image_means.mean(dim=0)
        self.error_std = (
            image_means.std(dim=0).clamp_min(1e-6) if len(image_means) > 1 else torch.ones_like(self.error_mean)
        )

    def scale_errors(self, error_maps: torch.Tensor) -> torch.Tensor:
        mean = self.error_mean.to(error_maps.dtype).reshape(-1, 1, 1)
        std = self.error_std.to(error_maps.dtype).reshape(-1, 1, 1)
        return (error_maps - mean) / std

    @override
    def forward(self, images: torch.Tensor, error_maps: torch.Tensor | None = None) -> torch.Tensor:
        """Logits (N,) for a batch of images and their (N, C2, h, w) error maps."""
        if self.mode is DetectorMode.LARE_ONLY:
            size = self.backbone.input_size
            scaled = self.scale_errors(_require_maps(error_maps))
            bundle = self.backbone(F.interpolate(scaled, size=(size, size), mode="nearest"))
            return self.egre(bundle, None)

        bundle = self.backbone(images)
        aligned = None
        if self.uses_error_map:
            grid = self.backbone.grid_size
            aligned = align(self.scale_errors(_require_maps(error_maps)), grid, grid)
        return self.egre(bundle, aligned)


def _require_maps(error_maps: torch.Tensor | None) -> torch.Tensor:
    if error_maps is None:
        raise ParameterError("this detector mode needs error maps")
    return error_maps


def build_detector(config: TrainConfig, mode: DetectorMode | None = None) -> Detector:
    return Detector(
        mode=mode or config.mode,
        image_channels=config.image_channels,
        latent_channels=config.latent_channels,
        feature_channels=config.feature_channels,
        heads=config.heads,
        head_dim=config.head_dim,
        input_size=config.input_size,
    )


def _detector_inputs(
    manifest: DatasetManifest, maps: Mapping[str, LaREMap] | None, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor]:
    images = load_images(manifest.paths()).to(dtype=dtype)
    if maps is None:
        return images, torch.zeros(len(manifest), 1, 1, 1, dtype=dtype)
    return images, gather_maps(maps, manifest).to(dtype=dtype)


@torch.no_grad()
def score_detector(
    detector: Detector,
    manifest: DatasetManifest,
    maps: Mapping[str, LaREMap] | None,
    batch_size: int = 256,
) -> ScoredSet:
    if detector.uses_error_map and maps is None:
        raise DataError(f"{detector.mode.value} detector needs a feature cache")
    dtype = next(detector.parameters()).dtype
    images, error_maps = _detector_inputs(manifest, maps, dtype)

    detector.eval()
    probabilities = torch.cat(
        [
            torch.sigmoid(
                detector(images[start : start + batch_size], error_maps[start : start + batch_size])
            )
            for start in range(0, len(manifest), batch_size)
        ]
    )
    return ScoredSet(
        scores=tuple(probabilities.double().tolist()),
        labels=tuple(record.label for record in manifest),
        ids=tuple(manifest.ids),
    )


def train_detector(
    manifest: DatasetManifest,
    maps: Mapping[str, LaREMap] | None,
    config: TrainConfig,
    seed: int,
    checkpoint_path: Path | None = None,
    *,
    mode: DetectorMode | None = None,
    subset: str | None = None,
) -> TrainingRun[Detector]:
    """
    Train on the `train` split (optionally one subset), selecting the epoch
    with the best validation accuracy. Fakes are the positive class.
    """
    mode = mode or config.mode
    if subset is not None:
        manifest = manifest.filter(subset=subset)
    train = manifest.filter(split="train")
    val = manifest.filter(split="val")
    if not len(train):
        raise ParameterError("detector training needs a non-empty training split")
    if mode is not DetectorMode.BASELINE and maps is None:
        raise DataError(f"{mode.value} detector needs a feature cache")

    settings = config.stage(Stage.DETECTOR)
    dtype = config.dtype
    images, error_maps = _detector_inputs(train, maps, dtype)
    labels = torch.tensor([record.label for record in train], dtype=dtype)
    if maps is not None and len(val):
        gather_maps(maps, val)

    detector = init_module(lambda: build_detector(config, mode), seed, dtype)
    if detector.uses_error_map:
        detector.fit_error_scaling(error_maps)
    optimizer = build_optimizer(detector.parameters(), settings)
    loader = seeded_loader(TensorDataset(images, error_maps, labels), settings.batch_size, seed)

    logger.info(
        f"Training {mode.value} detector on {len(train)} images "
        f"({int(labels.sum())} fake) for {settings.epochs} epochs"
    )
    epoch_losses: list[float] = []
    best_state, best_accuracy, best_epoch = None, -1.0, 0
    with deterministic_algorithms():
        for epoch in range(1, settings.epochs + 1):
            detector.train()
            total, seen = 0.0, 0
            for batch_images, batch_maps, batch_labels in loader:
                loss = F.binary_cross_entropy_with_logits(detector(batch_images, batch_maps), batch_labels)
                ensure_finite_loss(
                    loss,
                    stage="detector",
                    epoch=epoch,
                    save_state=lambda path: save_detector(path, detector),
                    checkpoint_path=checkpoint_path,
                )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * batch_labels.shape[0]
                seen += batch_labels.shape[0]
            epoch_losses.append(total / seen)

            if len(val):
                val_accuracy = accuracy(score_detector(detector, val, maps))
                logger.info(
                    f"detector epoch {epoch}/{settings.epochs}: BCE {epoch_losses[-1]:.4f}, "
                    f"val ACC {val_accuracy:.3f}"
                )
                if val_accuracy > best_accuracy:
                    best_state = copy.deepcopy(detector.state_dict())
                    best_accuracy, best_epoch = val_accuracy, epoch
            else:
                logger.info(f"detector epoch {epoch}/{settings.epochs}: BCE {epoch_losses[-1]:.4f}")

    if best_state is not None:
        detector.load_state_dict(best_state)
        logger.info(f"Selected epoch {best_epoch} (val ACC {best_accuracy:.3f})")
    detector.eval()

    metrics = {"train_acc": accuracy(score_detector(detector, train, maps))}
    if len(val):
        metrics["val_acc"] = best_accuracy
        metrics["best_epoch"] = float(best_epoch)

    if checkpoint_path is not None:
        save_detector(checkpoint_path, detector)
        logger.info(f"Saved detector to {checkpoint_path}")
    return TrainingRun(model=detector, epoch_losses=epoch_losses, checkpoint_path=checkpoint_path, metrics=metrics)


################################################################################
# Persistence
################################################################################
def save_detector(path: Path, detector: Detector) -> None:
    records = {"mode": MODES.index(detector.mode)}
    records.update(
        meta_records(
            DETECTOR_NAMESPACE,
            image_channels=detector.image_channels,
            latent_channels=detector.latent_channels,
            feature_channels=detector.egre.feature_channels,
            heads=detector.egre.heads,
            head_dim=detector.egre.head_dim,
            input_size=detector.backbone.input_size,
        )
    )
    records.update(module_records(detector.backbone, "backbone"))
    records.update(module_records(detector.egre, "egre"))
    records["error_mean"] = detector.error_mean
    records["error_std"] = detector.error_std
    write_checkpoint(path, records)


def load_detector(path: Path, dtype: torch.dtype = torch.float32) -> Detector:
    records = read_checkpoint(path)
    if "mode" not in records:
        raise DataError(f"{path}: missing record mode")
    index = int(round(records["mode"].item()))
    if not 0 <= index < len(MODES):
        raise DataError(f"{path}: unknown detector mode index {index}")

    detector = Detector(
        mode=MODES[index],
        image_channels=meta_int(records, DETECTOR_NAMESPACE, "image_channels"),
        latent_channels=meta_int(records, DETECTOR_NAMESPACE, "latent_channels"),
        feature_channels=meta_int(records, DETECTOR_NAMESPACE, "feature_channels"),
        heads=meta_int(records, DETECTOR_NAMESPACE, "heads"),
        head_dim=meta_int(records, DETECTOR_NAMESPACE, "head_dim"),
        input_size=meta_int(records, DETECTOR_NAMESPACE, "input_size"),
    ).to(dtype=dtype)
    load_module_records(detector.backbone, records, "backbone")
    load_module_records(detector.egre, records, "egre")
    for name in ("error_mean", "error_std"):
        if name not in records:
            raise DataError(f"{path}: missing record {name}")
        setattr(detector, name, torch.as_tensor(records[name]).to(dtype=dtype))
    return detector.eval()
