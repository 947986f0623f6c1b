"""SegNet-style encoder shared by up to three output heads.

The encoder records the argmax indices of every max-pooling stage; the dense
(normal and depth) decoders mirror the encoder and upsample with those
indices.  The vertex head is a convolution, a global average pool and one
linear layer.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

HEADS = ("normals", "depth", "vertices")
CHECKPOINT_FORMAT = "TLSFS1"


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (224, 224)
    heads: tuple[str, ...] = ("normals",)
    vertex_count: int | None = None
    stage_widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    convs_per_stage: tuple[int, ...] = (2, 2, 3, 3, 3)
    depth_bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "stage_widths", tuple(int(v) for v in self.stage_widths))
        object.__setattr__(self, "convs_per_stage", tuple(int(v) for v in self.convs_per_stage))
        if not self.heads:
            raise ValueError("at least one output head is required")
        unknown = set(self.heads) - set(HEADS)
        if unknown:
            raise ValueError(f"unknown heads: {sorted(unknown)}")
        if len(set(self.heads)) != len(self.heads):
            raise ValueError("duplicate heads")
        if ("vertices" in self.heads) != (self.vertex_count is not None):
            raise ValueError("vertex_count is required iff the vertices head is enabled")
        if self.vertex_count is not None and self.vertex_count < 1:
            raise ValueError("vertex_count must be positive")
        if len(self.stage_widths) != len(self.convs_per_stage) or not self.stage_widths:
            raise ValueError("stage_widths and convs_per_stage must be non-empty and equally long")
        if any(n < 1 for n in self.convs_per_stage):
            raise ValueError("every stage needs at least one convolution")
        step = 2 ** self.stages
        h, w = self.input_size
        if h % step or w % step:
            raise ValueError(f"input size {self.input_size} not divisible by {step}")

    @property
    def stages(self) -> int:
        return len(self.stage_widths)

    @property
    def latent_channels(self) -> int:
        return self.stage_widths[-1]

    @property
    def latent_size(self) -> tuple[int, int]:
        step = 2 ** self.stages
        return self.input_size[0] // step, self.input_size[1] // step

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LatentCode:
    features: torch.Tensor
    # (indices, pre-pool spatial size) per stage, shallowest first
    pooling_trace: list = field(default_factory=list)


def _conv_bn_relu(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class DenseDecoder(nn.Module):
    def __init__(self, widths, convs, out_channels):
        super().__init__()
        self.stages = nn.ModuleList()
        for s in reversed(range(len(widths))):
            w = widths[s]
            layers = []
            for _ in range(convs[s] - 1):
                layers += _conv_bn_relu(w, w)
            if s > 0:
                layers += _conv_bn_relu(w, widths[s - 1])
            else:
                layers.append(nn.Conv2d(w, out_channels, 3, padding=1))
            self.stages.append(nn.Sequential(*layers))

    def forward(self, latent: LatentCode) -> torch.Tensor:
        if not latent.pooling_trace:
            raise ValueError("latent code carries no pooling indices")
        if len(latent.pooling_trace) != len(self.stages):
            raise ValueError("pooling trace does not match the decoder depth")
        x = latent.features
        for stage, (idx, size) in zip(self.stages, reversed(latent.pooling_trace)):
            x = F.max_unpool2d(x, idx, kernel_size=2, stride=2, output_size=size)
            x = stage(x)
        return x


class VertexDecoder(nn.Module):
    def __init__(self, channels, vertex_count):
        super().__init__()
        self.vertex_count = vertex_count
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.fc = nn.Linear(channels, 3 * vertex_count)

    def forward(self, latent: LatentCode) -> torch.Tensor:
        x = F.relu(self.conv(latent.features))
        x = x.mean(dim=(2, 3))
        return self.fc(x).view(-1, self.vertex_count, 3)


class ShapeNet(nn.Module):
    """Shared encoder with the heads named in ``config.heads``."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        # training-set mean depth (mm); gauge for integrating predicted normals
        self.mean_depth: float | None = None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoder = nn.ModuleList()
            cin = 3
            for w, n in zip(config.stage_widths, config.convs_per_stage):
                layers = []
                for k in range(n):
                    layers += _conv_bn_relu(cin if k == 0 else w, w)
                self.encoder.append(nn.Sequential(*layers))
                cin = w
            self.decoders = nn.ModuleDict()
            for head in config.heads:
                if head == "normals":
                    self.decoders[head] = DenseDecoder(config.stage_widths, config.convs_per_stage, 3)
                elif head == "depth":
                    self.decoders[head] = DenseDecoder(config.stage_widths, config.convs_per_stage, 1)
                else:
                    self.decoders[head] = VertexDecoder(config.latent_channels, config.vertex_count)
            self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        if "depth" in self.decoders:
            nn.init.constant_(self.decoders["depth"].stages[-1][-1].bias, self.config.depth_bias)

    @property
    def heads(self):
        return self.config.heads

    def encode(self, masked: torch.Tensor) -> LatentCode:
        if masked.dim() != 4 or masked.shape[1] != 3:
            raise ValueError(f"expected an (N, 3, H, W) batch, got {tuple(masked.shape)}")
        if tuple(masked.shape[-2:]) != self.config.input_size:
            raise ValueError(f"input is {tuple(masked.shape[-2:])}, model expects {self.config.input_size}")
        x = masked
        trace = []
        for stage in self.encoder:
            x = stage(x)
            size = x.shape[-2:]
            x, idx = F.max_pool2d(x, kernel_size=2, stride=2, return_indices=True)
            trace.append((idx, size))
        return LatentCode(x, trace)

    def decode_dense(self, latent: LatentCode, head: str) -> torch.Tensor:
        if head not in ("normals", "depth"):
            raise ValueError(f"{head!r} is not a dense head")
        return self.decoders[head](latent)

    def decode_vertices(self, latent: LatentCode) -> torch.Tensor:
        return self.decoders["vertices"](latent)

    def forward(self, images: torch.Tensor, masks: torch.Tensor, heads=None) -> dict[str, torch.Tensor]:
        """Predictions keyed by head: normals ``(N,3,H,W)``, depth ``(N,H,W)``, vertices ``(N,V,3)``.

        ``heads`` restricts which decoders run (default: all configured ones).
        """
        heads = self.config.heads if heads is None else tuple(heads)
        m = masks.bool()
        if m.dim() == 3:
            m = m[:, None]
        masked = torch.where(m, images, torch.zeros((), dtype=images.dtype))
        latent = self.encode(masked)
        out = {}
        for head in heads:
            if head not in self.config.heads:
                raise ValueError(f"model has no {head!r} head")
            if head == "vertices":
                out[head] = self.decode_vertices(latent)
            else:
                y = self.decode_dense(latent, head)
                out[head] = y[:, 0] if head == "depth" else y
        return out

    @torch.inference_mode()
    def predict(self, image: np.ndarray, mask: np.ndarray) -> dict[str, np.ndarray]:
        """Single-image inference on numpy arrays (``(H, W, 3)`` image, ``(H, W)`` mask)."""
        was_training = self.training
        self.eval()
        try:
            img = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
            msk = torch.from_numpy(np.asarray(mask, dtype=bool))[None]
            out = self(img, msk)
        finally:
            self.train(was_training)
        res = {}
        for head, y in out.items():
            y = y[0].numpy().astype(np.float64)
            res[head] = np.moveaxis(y, 0, -1) if head == "normals" else y
        return res


def weight_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(path, model: ShapeNet, epoch: int = 0, optimizer_state=None, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "weights": model.state_dict(),
        "epoch": epoch,
        "optimizer": optimizer_state,
        "extra": {"mean_depth": model.mean_depth, **(extra or {})},
    }, path)
    return path


def load_checkpoint(path) -> tuple[ShapeNet, dict]:
    """Rebuild a model from a checkpoint; returns ``(model, raw_checkpoint)``."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    model = ShapeNet(ModelConfig.from_dict(ckpt["config"]))
    model.load_state_dict(ckpt["weights"])
    model.mean_depth = (ckpt.get("extra") or {}).get("mean_depth")
    model.eval()
    return model, ckpt
