"""Model loading and batch scoring for the bridge.

The scorer accepts float32 images shaped (B, H, W, C) with values in [0, 1],
C being 1 (replicated to RGB) or 3.  Preprocessing — channel replication,
bilinear resize to the model's input size, and per-channel normalization —
runs in float32 on the target device; the tensor is cast to the model's dtype
only for the forward pass, and class probabilities are computed in float32 so
fp16 inference still returns finite, normalized scores.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.models as tv_models

__all__ = [
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "BridgeConfig",
    "load_model",
    "TorchScorer",
    "self_test",
]

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_PRECISIONS = {"fp32": torch.float32, "fp16": torch.float16}


@dataclass(frozen=True)
class BridgeConfig:
    """Everything that determines how the bridge scores a batch."""

    model: str
    device: str = "cpu"
    precision: str = "fp32"
    batch_cap: int = 64  # images per forward pass; larger requests are split
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    input_size: int = 224
    weights_path: "str | None" = None
    random_init: bool = False
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_cap < 1:
            raise ValueError(f"batch_cap must be >= 1, got {self.batch_cap}")
        if self.precision not in _PRECISIONS:
            raise ValueError(
                f"precision must be one of {sorted(_PRECISIONS)}, got {self.precision!r}"
            )
        if self.input_size < 1:
            raise ValueError(f"input_size must be >= 1, got {self.input_size}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std must each hold 3 channel values")
        if any(s == 0 for s in self.std):
            raise ValueError("std values must be nonzero")


def _check_device(device: str) -> torch.device:
    try:
        dev = torch.device(device)
    except RuntimeError as exc:
        raise ValueError(f"unknown device {device!r}: {exc}") from exc
    if dev.type == "cuda" and not torch.cuda.is_available():
        raise ValueError("device 'cuda' requested but no CUDA runtime is available")
    return dev


def load_model(config: BridgeConfig) -> torch.nn.Module:
    """Build the requested torchvision architecture in eval mode.

    Weight sources, in order of precedence: ``random_init`` (seeded, for
    offline testing), ``weights_path`` (a local state-dict file), else the
    published pretrained weights (downloaded by torchvision).
    """
    if config.model not in set(tv_models.list_models()):
        raise ValueError(
            f"unknown model {config.model!r}; valid names come from "
            f"torchvision (e.g. resnet18, resnet50, mobilenet_v3_small)"
        )
    device = _check_device(config.device)

    if config.random_init:
        torch.manual_seed(config.init_seed)
        model = tv_models.get_model(config.model, weights=None)
    elif config.weights_path:
        model = tv_models.get_model(config.model, weights=None)
        state = torch.load(config.weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    else:
        weights = tv_models.get_model_weights(config.model).DEFAULT
        try:
            model = tv_models.get_model(config.model, weights=weights)
        except Exception as exc:
            raise RuntimeError(
                f"pretrained weights for {config.model!r} could not be loaded "
                f"({exc}); pass --weights <state-dict file> or --random-init"
            ) from exc

    model.eval().to(device)
    if config.precision == "fp16":
        model.half()
    return model


class TorchScorer:
    """Batch scorer over a loaded model; thread-safe, order-preserving.

    ``score_batch`` accepts any batch size: requests beyond ``batch_cap`` are
    split into consecutive chunks and the results concatenated in request
    order.  Scores are softmax probabilities, float32, one row per image.
    """

    def __init__(self, model: torch.nn.Module, config: BridgeConfig):
        self.model = model
        self.config = config
        self._device = torch.device(config.device)
        self._dtype = _PRECISIONS[config.precision]
        self._lock = threading.Lock()
        self._mean = torch.tensor(
            config.mean, dtype=torch.float32, device=self._device
        ).view(1, 3, 1, 1)
        self._std = torch.tensor(
            config.std, dtype=torch.float32, device=self._device
        ).view(1, 3, 1, 1)
        probe = torch.zeros(
            1, 3, config.input_size, config.input_size,
            dtype=self._dtype, device=self._device,
        )
        with torch.no_grad():
            out = self.model(probe)
        if out.ndim != 2 or out.shape[1] < 1:
            raise ValueError(f"model emits {tuple(out.shape)}, expected (B, classes)")
        self.num_classes = int(out.shape[1])

    @classmethod
    def from_config(cls, config: BridgeConfig) -> "TorchScorer":
        return cls(load_model(config), config)

    def _forward_chunk(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.ascontiguousarray(chunk)
        if not chunk.flags.writeable:
            # wire payloads arrive as read-only buffer views; torch insists on
            # writable memory even though the tensor is only ever read
            chunk = chunk.copy()
        x = torch.from_numpy(chunk).to(self._device)
        x = x.permute(0, 3, 1, 2)  # (B, H, W, C) -> (B, C, H, W)
        size = self.config.input_size
        if x.shape[2] != size or x.shape[3] != size:
            x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
        x = (x - self._mean) / self._std
        logits = self.model(x.to(self._dtype))
        probs = torch.softmax(logits.float(), dim=1)
        return probs.cpu().numpy().astype(np.float32)

    def score_batch(self, images: np.ndarray) -> np.ndarray:
        arr = np.asarray(images, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise ValueError(f"expected images shaped (B, H, W, C), got {arr.shape}")
        channels = arr.shape[3]
        if channels == 1:
            arr = np.repeat(arr, 3, axis=3)
        elif channels != 3:
            raise ValueError(f"expected 1 or 3 channels, got {channels}")
        cap = self.config.batch_cap
        with self._lock, torch.no_grad():
            chunks = [
                self._forward_chunk(arr[start : start + cap])
                for start in range(0, arr.shape[0], cap)
            ]
        return np.concatenate(chunks, axis=0)


def self_test(config: BridgeConfig, probe_images: int = 4, seed: int = 0) -> dict:
    """Compare fp16 and fp32 scores of the same model on the same batch.

    Diagnostic only: the divergence is reported, no bound is asserted.  Both
    legs load identical weights (same source, same init seed); the probe batch
    is seeded random [0, 1] RGB at 64x64, exercising the resize path.
    """
    if probe_images < 1:
        raise ValueError(f"probe_images must be >= 1, got {probe_images}")
    batch = (
        np.random.default_rng(seed)
        .random((probe_images, 64, 64, 3))
        .astype(np.float32)
    )
    scores32 = TorchScorer.from_config(replace(config, precision="fp32")).score_batch(batch)
    scores16 = TorchScorer.from_config(replace(config, precision="fp16")).score_batch(batch)
    diff = np.abs(scores32.astype(np.float64) - scores16.astype(np.float64))
    return {
        "model": config.model,
        "probe_images": probe_images,
        "classes": int(scores32.shape[1]),
        "max_abs_divergence": float(diff.max()),
        "mean_abs_divergence": float(diff.mean()),
        "top1_agreement": float(
            np.mean(np.argmax(scores32, axis=1) == np.argmax(scores16, axis=1))
        ),
    }
