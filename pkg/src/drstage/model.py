"""Regression-headed vision transformer with attention capture.

The backbone is pluggable: :class:`ViTBackbone` (DINOv2-style, also used
for the tiny desk-scale model) exposes per-block attention, while
:class:`ConvBackbone` stands in for convolutional baselines and cannot be
traced. Parameter names of :class:`ViTBackbone` follow the DINOv2
checkpoint layout so published weights load with an identity mapping.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import yaml

from .errors import CapabilityError, IncompatibleWeightsError, ShapeError
from .preprocess import IMAGENET_MEAN, IMAGENET_STD
from .trace import AttentionTrace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackboneConfig:
    image_side: int = 518
    patch_side: int = 14
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    layer_scale: bool = True
    kind: str = "vit"
    pretrained_source: Optional[str] = None
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone kind {self.kind!r}; choose from {sorted(BACKBONES)}")
        if min(self.image_side, self.patch_side, self.embed_dim, self.depth, self.num_heads) <= 0:
            raise ValueError("backbone dimensions must be positive")
        if self.kind == "vit":
            if self.image_side % self.patch_side:
                raise ValueError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
            if self.embed_dim % self.num_heads:
                raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def token_count(self) -> int:
        return self.grid_side**2 + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    @classmethod
    def vit_base(cls, **kw) -> "BackboneConfig":
        return cls(**kw)

    @classmethod
    def toy(cls, **kw) -> "BackboneConfig":
        base = dict(image_side=32, patch_side=8, embed_dim=32, depth=2, num_heads=2)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 768
    hidden_dim: int = 512

    def to_dict(self) -> dict:
        return asdict(self)


class RegressionHead(nn.Module):
    """Linear -> GELU -> Linear to a single scalar."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.fc1 = nn.Linear(cfg.in_dim, cfg.hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(cfg.hidden_dim, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for layer in (self.fc1, self.fc2):
            nn.init.trunc_normal_(layer.weight, std=0.02)
            nn.init.zeros_(layer.bias)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x))).squeeze(-1)


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, capture=None, override=None):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        if override is not None:
            attn = override
        if capture is not None:
            if attn.requires_grad:
                attn.retain_grad()
            capture.append(attn)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class LayerScale(nn.Module):
    def __init__(self, dim, init_value=1.0):
        super().__init__()
        self.gamma = nn.Parameter(torch.full((dim,), float(init_value)))

    def forward(self, x):
        return x * self.gamma


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio, layer_scale):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.ls1 = LayerScale(dim) if layer_scale else nn.Identity()
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = LayerScale(dim) if layer_scale else nn.Identity()

    def forward(self, x, capture=None, override=None):
        x = x + self.ls1(self.attn(self.norm1(x), capture, override))
        return x + self.ls2(self.mlp(self.norm2(x)))


class Backbone(nn.Module):
    """Interface every backbone implements."""

    supports_tracing = False

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dim

    def forward_features(self, x, capture=None, overrides=None):
        raise NotImplementedError


class PatchEmbed(nn.Module):
    def __init__(self, patch, dim):
        super().__init__()
        self.proj = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class ViTBackbone(Backbone):
    supports_tracing = True

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        d = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg.patch_side, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.token_count, d))
        self.blocks = nn.ModuleList(
            [Block(d, cfg.num_heads, cfg.mlp_ratio, cfg.layer_scale) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward_features(self, x, capture=None, overrides=None):
        x = self.patch_embed(x)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for b, blk in enumerate(self.blocks):
            override = None if overrides is None else overrides.get(b)
            x = blk(x, capture, override)
        return self.norm(x)[:, 0]


class ConvBackbone(Backbone):
    """Small convolutional backbone occupying the CNN-baseline slot.

    ``depth`` stride-2 conv stages followed by global average pooling.
    It has no attention and therefore cannot be traced.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__(cfg)
        layers = []
        ch = 3
        for i in range(cfg.depth):
            out = cfg.embed_dim if i == cfg.depth - 1 else max(8, cfg.embed_dim // 2 ** (cfg.depth - 1 - i))
            layers += [nn.Conv2d(ch, out, 3, stride=2, padding=1), nn.BatchNorm2d(out), nn.GELU()]
            ch = out
        self.features = nn.Sequential(*layers)

    def forward_features(self, x, capture=None, overrides=None):
        if capture is not None or overrides:
            raise CapabilityError("convolutional backbone has no attention to trace")
        return self.features(x).mean(dim=(2, 3))


BACKBONES = {"vit": ViTBackbone, "conv": ConvBackbone}


class DRStageNet(nn.Module):
    """Backbone classification-token embedding -> regression head -> score."""

    def __init__(self, backbone: Backbone, head: RegressionHead):
        super().__init__()
        if head.cfg.in_dim != backbone.embed_dim:
            raise IncompatibleWeightsError(
                f"head in_dim {head.cfg.in_dim} != backbone embed_dim {backbone.embed_dim}",
                ["head.fc1.weight"],
            )
        self.backbone = backbone
        self.head = head

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.cfg

    def forward(self, x, capture=None, overrides=None):
        return self.head(self.backbone.forward_features(x, capture, overrides))


def build_model(
    backbone_cfg: BackboneConfig,
    head: Optional[HeadConfig] = None,
    seed: Optional[int] = None,
    device=None,
) -> DRStageNet:
    """Instantiate the network; all parameters remain trainable.

    With ``pretrained_source`` set, backbone weights come from that
    descriptor (or checkpoint file) and the head keeps its fresh init.
    """
    if head is None:
        head = HeadConfig(in_dim=backbone_cfg.embed_dim)
    if head.in_dim != backbone_cfg.embed_dim:
        raise IncompatibleWeightsError(
            f"head in_dim {head.in_dim} != backbone embed_dim {backbone_cfg.embed_dim}", ["head.fc1.weight"]
        )

    def make():
        with torch.device(device) if device is not None else _nullctx():
            return DRStageNet(BACKBONES[backbone_cfg.kind](backbone_cfg), RegressionHead(head))

    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            model = make()
    else:
        model = make()
    if backbone_cfg.pretrained_source:
        load_pretrained(model.backbone, backbone_cfg.pretrained_source)
    return model


class _nullctx:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def describe_backbone(model: DRStageNet) -> BackboneConfig:
    return model.config


def _check_input(model: DRStageNet, x: torch.Tensor):
    side = model.config.image_side
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != side or x.shape[3] != side:
        raise ShapeError(f"expected batch of 3 x {side} x {side} tensors, got {tuple(x.shape)}")


def _as_batch(batch, dtype) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        x = batch
    elif isinstance(batch, np.ndarray):
        x = torch.from_numpy(batch)
    else:
        x = torch.stack([torch.as_tensor(np.asarray(b)) for b in batch])
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.to(dtype)


def _param_dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def forward(model: DRStageNet, batch) -> list[float]:
    """Evaluation-mode scores, one float per item."""
    x = _as_batch(batch, _param_dtype(model))
    _check_input(model, x)
    was_training = model.training
    model.eval()
    try:
        out = model(x)
    finally:
        model.train(was_training)
    return [float(v) for v in out]


def forward_traced(model: DRStageNet, image) -> tuple[float, AttentionTrace]:
    """Score one image and capture every block's attention together with
    the gradient of the score with respect to it."""
    if not model.backbone.supports_tracing:
        raise CapabilityError(f"backbone {model.config.kind!r} does not expose attention")
    x = _as_batch(image, _param_dtype(model))
    if x.shape[0] != 1:
        raise ShapeError("forward_traced takes a single image")
    _check_input(model, x)
    was_training = model.training
    model.eval()
    captured: list[torch.Tensor] = []
    try:
        with torch.enable_grad():
            model.zero_grad(set_to_none=True)
            score = model(x, capture=captured)
            score.sum().backward()
    finally:
        model.train(was_training)
    atts = tuple(a.detach()[0].double().numpy().copy() for a in captured)
    grads = tuple(
        a.grad[0].double().numpy().copy() if a.grad is not None else np.zeros(a.shape[1:]) for a in captured
    )
    model.zero_grad(set_to_none=True)
    return float(score.detach()[0]), AttentionTrace(atts, grads)


def score_with_attention(model: DRStageNet, image, overrides: dict) -> float:
    """Score one image with selected blocks' attention replaced by given
    ``heads x s x s`` tensors (used for finite-difference checks)."""
    x = _as_batch(image, _param_dtype(model))
    dtype = _param_dtype(model)
    ov = {b: torch.as_tensor(np.asarray(a), dtype=dtype).unsqueeze(0) for b, a in overrides.items()}
    model.eval()
    with torch.no_grad():
        return float(model(x, overrides=ov)[0])


# -- weight files -----------------------------------------------------------


def read_name_mapping(path) -> dict[str, str]:
    """Two whitespace-separated columns: published name, internal name.
    Blank lines and ``#`` comments are ignored."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected two columns, got {len(parts)}")
        mapping[parts[0]] = parts[1]
    return mapping


def _unwrap_state(obj):
    for key in ("state_dict", "model", "teacher"):
        if isinstance(obj, dict) and key in obj and isinstance(obj[key], dict):
            obj = obj[key]
    return obj


def load_backbone_weights(backbone: Backbone, checkpoint, mapping: Optional[dict] = None) -> list[str]:
    """Copy tensors from a published checkpoint into ``backbone``.

    Names are translated with ``mapping`` (identity when absent). Missing
    or shape-mismatched tensors raise :class:`IncompatibleWeightsError`
    listing every offender. Returns the checkpoint names that were unused.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = torch.load(checkpoint, map_location="cpu", weights_only=True)
    state = _unwrap_state(checkpoint)
    mapping = mapping or {}
    translated = {mapping.get(k, k): v for k, v in state.items()}
    own = backbone.state_dict()
    missing = [k for k in own if k not in translated]
    mismatched = [
        f"{k}: checkpoint {tuple(translated[k].shape)} vs model {tuple(v.shape)}"
        for k, v in own.items()
        if k in translated and tuple(translated[k].shape) != tuple(v.shape)
    ]
    if missing or mismatched:
        problems = [f"{k}: missing" for k in missing] + mismatched
        raise IncompatibleWeightsError("incompatible backbone weights:\n  " + "\n  ".join(problems), problems)
    backbone.load_state_dict({k: translated[k] for k in own})
    unused = sorted(k for k in translated if k not in own)
    if unused:
        log.info("ignored %d checkpoint tensors: %s", len(unused), ", ".join(unused[:8]))
    return unused


def load_pretrained(backbone: Backbone, source) -> list[str]:
    """``source`` is a checkpoint file or a YAML descriptor with keys
    ``checkpoint`` and optional ``mapping`` (paths relative to the file)."""
    source = Path(source)
    if source.suffix.lower() in (".yaml", ".yml"):
        desc = yaml.safe_load(source.read_text()) or {}
        ckpt = source.parent / desc["checkpoint"]
        mapping = read_name_mapping(source.parent / desc["mapping"]) if desc.get("mapping") else None
        return load_backbone_weights(backbone, ckpt, mapping)
    return load_backbone_weights(backbone, source)


def save_checkpoint(model: DRStageNet, path, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = replace(model.config, pretrained_source=None)
    torch.save(
        {
            "backbone": cfg.to_dict(),
            "head": model.head.cfg.to_dict(),
            "state_dict": model.state_dict(),
            **extra,
        },
        path,
    )
    return path


def load_checkpoint(path) -> tuple[DRStageNet, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    try:
        cfg = BackboneConfig.from_dict(blob["backbone"])
        head = HeadConfig(**blob["head"])
        model = build_model(cfg, head)
        state = blob["state_dict"]
    except (KeyError, TypeError) as exc:
        raise IncompatibleWeightsError(f"{path}: not a drstage checkpoint ({exc})") from exc
    own = model.state_dict()
    bad = [k for k in own if k not in state or tuple(state[k].shape) != tuple(own[k].shape)]
    if bad:
        raise IncompatibleWeightsError(f"{path}: incompatible tensors: {', '.join(bad)}", bad)
    model.load_state_dict(state)
    model.eval()
    meta = {k: v for k, v in blob.items() if k not in ("state_dict",)}
    return model, meta


def model_dtype(model) -> torch.dtype:
    return _param_dtype(model)


def normalization(model: DRStageNet) -> tuple[Sequence[float], Sequence[float]]:
    return model.config.mean, model.config.std
