"""Interactive segmentation network with edge-guided flow alignment.

The coarse path fuses image and interaction features (click disks plus an
edge prior) at three sites: an early additive fusion at input resolution,
then two flow-based alignments inside the trunk where a predicted 2-channel
flow field warps the interaction features onto the image features before
mixing. A light decoder emits mask and edge logits; an optional refinement
head (three dilated conv blocks with a residual connection) sharpens the
mask at full resolution.

Everything is expressed with the tape-based tensors from
:mod:`edgeflow.tensor`, so the same forward code serves training,
finite-difference checking, and inference.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .clicks import (
    Click,
    InteractionState,
    binarize,
    encode_clicks,
    extract_edge_mask,
    sobel_edge,
)
from .tensor import ShapeError, Tensor

FUSION_VARIANTS = ("concat_conv", "dual_conv_add")
PRIOR_MODES = ("ei", "si", "none")

CHECKPOINT_MAGIC = b"EFCP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    stages: int = 4
    fusion_variant: str = "dual_conv_add"
    use_edge_flow: bool = True
    use_finenet: bool = True
    prior_mode: str = "ei"
    finenet_dilations: tuple = (2, 4, 8)
    input_size: tuple = (64, 64)

    def __post_init__(self):
        if self.base_channels < 8:
            raise ValueError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.stages != 4:
            raise ValueError("the trunk is fixed at 4 stage blocks")
        if self.fusion_variant not in FUSION_VARIANTS:
            raise ValueError(
                f"fusion_variant must be one of {FUSION_VARIANTS}, got {self.fusion_variant!r}"
            )
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}")
        object.__setattr__(self, "finenet_dilations", tuple(int(d) for d in self.finenet_dilations))
        if len(self.finenet_dilations) != 3:
            raise ValueError("finenet_dilations must have exactly 3 entries")
        if any(d < 1 for d in self.finenet_dilations):
            raise ValueError("finenet_dilations must be positive")
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.input_size) != 2 or min(self.input_size) < 8:
            raise ValueError(f"input_size must be (H, W) with H, W >= 8, got {self.input_size}")

    # --- plumbing -----------------------------------------------------

    @property
    def interaction_channels(self) -> int:
        """Channels of the interaction bundle: click disks, plus the edge
        prior when the edge-flow pathway is enabled."""
        return 3 if self.use_edge_flow else 2

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "stages": self.stages,
            "fusion_variant": self.fusion_variant,
            "use_edge_flow": self.use_edge_flow,
            "use_finenet": self.use_finenet,
            "prior_mode": self.prior_mode,
            "finenet_dilations": list(self.finenet_dilations),
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


@dataclass
class Model:
    """A config plus a flat, ordered name -> parameter tensor map."""

    config: ModelConfig
    params: Dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self) -> list:
        return list(self.params.items())

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def cast(self, dtype) -> "Model":
        """Copy of the model with parameters converted to dtype (the f64
        variant is what finite-difference checks run against)."""
        out = Model(self.config)
        for name, t in self.params.items():
            out.params[name] = Tensor(t.data.astype(dtype), requires_grad=True)
        return out


def _gn_groups(channels: int) -> int:
    for g in (4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _channel_plan(config: ModelConfig) -> dict:
    c = config.base_channels
    return {
        "early": max(c // 2, 4),
        "trunk": c,
        "wide": 2 * c,
        "flow_hidden": c,
        "fine": max(c, 8),
    }


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministically initialize all parameters for the given config.

    Conv weights draw from a fan-in-scaled normal; biases start at zero.
    The final conv of each flow predictor and the refinement output conv
    start at zero so that, at initialization, flows are identically zero
    (the warp is an identity) and the refined mask equals the coarse mask.
    """
    rng = np.random.default_rng(seed)
    ch = _channel_plan(config)
    model = Model(config)

    def conv(name: str, c_out: int, c_in: int, k: int, zero: bool = False) -> None:
        if zero:
            w = np.zeros((c_out, c_in, k, k), dtype=np.float32)
        else:
            std = np.sqrt(2.0 / (c_in * k * k))
            w = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(np.float32)
        model.params[name + ".w"] = Tensor(w, requires_grad=True)
        model.params[name + ".b"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)

    k_int = config.interaction_channels
    if config.fusion_variant == "dual_conv_add":
        conv("fuse1.img", ch["early"], 3, 3)
        conv("fuse1.int", ch["early"], k_int, 3)
    else:
        conv("fuse1.joint", ch["early"], 3 + k_int, 3)

    # 2x2 stride-2 stems: with ceil "same" padding these need no padding at
    # all on even sizes, and their output centers land on the half-pixel
    # grid the decoder's bilinear upsample assumes. A 3x3 stride-2 stem
    # would shift the feature lattice 0.5 px per level and cost boundary
    # accuracy that nothing downstream can recover.
    conv("stem.conv1", ch["trunk"], ch["early"], 2)
    conv("stem.conv2", ch["trunk"], ch["trunk"], 2)

    if config.use_edge_flow:
        conv("istem.conv1", ch["trunk"], k_int, 2)
        conv("istem.conv2", ch["trunk"], ch["trunk"], 2)

    conv("stage1.conv1", ch["trunk"], ch["trunk"], 3)
    conv("stage1.conv2", ch["trunk"], ch["trunk"], 3)
    conv("transition.conv", ch["wide"], ch["trunk"], 3)

    if config.use_edge_flow:
        conv("flow2.conv1", ch["flow_hidden"], ch["wide"] + ch["trunk"], 3)
        conv("flow2.conv2", 2, ch["flow_hidden"], 3, zero=True)
        conv("flow2.proj", ch["wide"], ch["trunk"], 1)

    for i in (2, 3, 4):
        conv(f"stage{i}.conv1", ch["wide"], ch["wide"], 3)
        conv(f"stage{i}.conv2", ch["wide"], ch["wide"], 3)

    if config.use_edge_flow:
        conv("flow3.conv1", ch["flow_hidden"], ch["wide"] + ch["trunk"], 3)
        conv("flow3.conv2", 2, ch["flow_hidden"], 3, zero=True)
        conv("flow3.proj", ch["wide"], ch["trunk"], 1)

    conv("decoder.conv1", ch["trunk"], ch["wide"], 3)
    conv("decoder.mask", 1, ch["trunk"], 3)
    conv("edge.conv", 1, ch["trunk"], 1)

    if config.use_finenet:
        conv("fine.block1.conv", ch["fine"], 6, 3)
        conv("fine.block2.conv", ch["fine"], ch["fine"], 3)
        conv("fine.block3.conv", ch["fine"], ch["fine"], 3)
        conv("fine.out", 1, ch["fine"], 3, zero=True)
    return model


# ---------------------------------------------------------------------------
# forward pieces


@dataclass
class ForwardOutput:
    """Logit bundle; refined_logits is None when refinement is disabled.

    Shapes mirror the inputs: (1, H, W) for a single interaction state,
    (N, 1, H, W) for a batch.
    """

    coarse_logits: Tensor
    edge_logits: Tensor
    refined_logits: Optional[Tensor] = None

    @property
    def final_logits(self) -> Tensor:
        return self.refined_logits if self.refined_logits is not None else self.coarse_logits


def _p(model: Model, name: str, kind: str) -> Tensor:
    return model.params[f"{name}.{kind}"]


def _conv(model: Model, name: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    return T.conv2d(x, _p(model, name, "w"), _p(model, name, "b"), stride=stride, dilation=dilation)


def _conv_gn_relu(model: Model, name: str, x: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    y = _conv(model, name, x, stride=stride, dilation=dilation)
    y = T.group_normalize(y, groups=_gn_groups(y.shape[1]))
    return T.relu(y)


def _stage(model: Model, name: str, x: Tensor) -> Tensor:
    y = _conv_gn_relu(model, f"{name}.conv1", x)
    y = _conv(model, f"{name}.conv2", y)
    y = T.group_normalize(y, groups=_gn_groups(y.shape[1]))
    return T.relu(x + y)


def fuse_early(model: Model, f_img: Tensor, f_int: Tensor, variant: Optional[str] = None) -> Tensor:
    """First fusion site, at input resolution.

    dual_conv_add runs one 3x3 conv per input and adds the results;
    concat_conv concatenates the inputs and runs a single 3x3 conv.
    """
    variant = variant or model.config.fusion_variant
    if f_img.shape[2:] != f_int.shape[2:] or f_img.shape[0] != f_int.shape[0]:
        raise ShapeError(f"fuse_early: spatial mismatch {f_img.shape} vs {f_int.shape}")
    if variant == "dual_conv_add":
        return _conv(model, "fuse1.img", f_img) + _conv(model, "fuse1.int", f_int)
    if variant == "concat_conv":
        return _conv(model, "fuse1.joint", T.concat_channels([f_img, f_int]))
    raise ValueError(f"unknown fusion variant {variant!r}")


def flow_align(model: Model, f_img: Tensor, f_int: Tensor, site: str = "flow2") -> Tensor:
    """Warp interaction features onto image features along a predicted flow.

    flow = conv3x3(relu(conv3x3(concat(f_img, f_int)))), two channels; the
    warped features enter through a 1x1 conv added onto f_img. Because the
    final flow conv starts at zero, this is f_img + conv1x1(f_int) at init.
    """
    if f_int.shape[2:] != f_img.shape[2:]:
        f_int = T.bilinear_resize(f_int, f_img.shape[2], f_img.shape[3])
    h = T.relu(_conv(model, f"{site}.conv1", T.concat_channels([f_img, f_int])))
    flow = _conv(model, f"{site}.conv2", h)
    aligned = T.warp_bilinear(f_int, flow)
    return f_img + _conv(model, f"{site}.proj", aligned)


def _as_batched_tensor(arr, dtype) -> Tensor:
    if isinstance(arr, Tensor):
        return arr
    a = np.asarray(arr, dtype=dtype)
    if a.ndim == 3:
        a = a[None]
    return Tensor(a)


def coarse_forward_batch(model: Model, image: Tensor, interaction: Tensor) -> ForwardOutput:
    """Trunk forward on batched NCHW tensors; returns coarse and edge logits."""
    cfg = model.config
    h, w = image.shape[2], image.shape[3]
    x = fuse_early(model, image, interaction)
    x = _conv_gn_relu(model, "stem.conv1", x, stride=2)
    x = _conv_gn_relu(model, "stem.conv2", x, stride=2)

    g = None
    if cfg.use_edge_flow:
        g = _conv_gn_relu(model, "istem.conv1", interaction, stride=2)
        g = _conv_gn_relu(model, "istem.conv2", g, stride=2)

    x = _stage(model, "stage1", x)
    x = _conv_gn_relu(model, "transition.conv", x)
    if cfg.use_edge_flow:
        x = flow_align(model, x, g, site="flow2")
    x = _stage(model, "stage2", x)
    x = _stage(model, "stage3", x)
    x = _stage(model, "stage4", x)
    if cfg.use_edge_flow:
        x = flow_align(model, x, g, site="flow3")

    d = _conv_gn_relu(model, "decoder.conv1", x)
    coarse = T.bilinear_resize(_conv(model, "decoder.mask", d), h, w)
    edge = T.bilinear_resize(_conv(model, "edge.conv", d), h, w)
    return ForwardOutput(coarse_logits=coarse, edge_logits=edge)


def _interaction_bundle(model: Model, click_map: Tensor, edge_prior: Optional[Tensor]) -> Tensor:
    if model.config.use_edge_flow:
        if edge_prior is None:
            raise ShapeError("edge prior required when the edge-flow pathway is enabled")
        return T.concat_channels([click_map, edge_prior])
    return click_map


def coarse_forward(model: Model, state: InteractionState) -> ForwardOutput:
    """Single-state coarse forward; outputs are (1, H, W) logits."""
    cfg = model.config
    if state.image.shape[1:] != cfg.input_size:
        raise ShapeError(
            f"state size {state.image.shape[1:]} != configured input size {cfg.input_size}"
        )
    dt = np.float32
    image = _as_batched_tensor(state.image, dt)
    clicks = _as_batched_tensor(state.click_map, dt)
    prior = _as_batched_tensor(state.edge_prior, dt) if cfg.use_edge_flow else None
    out = coarse_forward_batch(model, image, _interaction_bundle(model, clicks, prior))
    h, w = cfg.input_size
    return ForwardOutput(
        coarse_logits=T.reshape(out.coarse_logits, (1, h, w)),
        edge_logits=T.reshape(out.edge_logits, (1, h, w)),
    )


def fine_forward(model: Model, image, click_map, coarse_logits) -> Tensor:
    """Residual refinement: dilated conv blocks over (image, clicks,
    coarse probability), added back onto the coarse logits."""
    cfg = model.config
    if not cfg.use_finenet:
        raise ValueError("refinement head is disabled in this config")
    squeeze = (not isinstance(image, Tensor)) and np.asarray(image).ndim == 3
    dt = coarse_logits.dtype.type if isinstance(coarse_logits, Tensor) else np.float32
    image = _as_batched_tensor(image, dt)
    click_map = _as_batched_tensor(click_map, dt)
    if not isinstance(coarse_logits, Tensor) or coarse_logits.ndim == 3:
        coarse_logits = _as_batched_tensor(coarse_logits, dt)
    x = T.concat_channels([image, click_map, T.sigmoid(coarse_logits)])
    for i, dil in enumerate(cfg.finenet_dilations, start=1):
        x = _conv_gn_relu(model, f"fine.block{i}.conv", x, dilation=dil)
    refined = _conv(model, "fine.out", x) + coarse_logits
    if squeeze:
        refined = T.reshape(refined, refined.shape[1:])
    return refined


def forward_full(model: Model, image: Tensor, click_map: Tensor,
                 edge_prior: Optional[Tensor]) -> ForwardOutput:
    """Coarse trunk plus (when enabled) the refinement head, batched."""
    out = coarse_forward_batch(model, image, _interaction_bundle(model, click_map, edge_prior))
    if model.config.use_finenet:
        out.refined_logits = fine_forward(model, image, click_map, out.coarse_logits)
    return out


# ---------------------------------------------------------------------------
# inference


def _resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) float array, outside any tape."""
    t = T.bilinear_resize(Tensor(arr[None].astype(np.float64)), out_h, out_w)
    return t.data[0]


def _scale_clicks(clicks: Sequence[Click], src_hw, dst_hw) -> list:
    sh, sw = src_hw
    dh, dw = dst_hw
    out = []
    for c in clicks:
        x = (c.x + 0.5) * dw / sw - 0.5
        y = (c.y + 0.5) * dh / sh - 0.5
        x = min(max(x, 0.0), dw - 1.0)
        y = min(max(y, 0.0), dh - 1.0)
        out.append(Click(x=x, y=y, polarity=c.polarity, index=c.index))
    return out


def predict_step(model: Model, image: np.ndarray, clicks: Sequence[Click],
                 prev_pred: Optional[np.ndarray] = None):
    """One interaction round: encode clicks and edge prior, run the network,
    and return (probability map, edge mask of the new binarized prediction).

    The image may be any size; it is resampled to the configured input size
    for the network and the probabilities are resampled back.
    """
    clicks = list(clicks)
    if not clicks:
        raise ValueError("predict_step requires at least one click")
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be (3, H, W), got {image.shape}")
    cfg = model.config
    native_hw = image.shape[1:]
    net_hw = cfg.input_size
    resample = native_hw != net_hw

    if resample:
        net_image = _resize_array(image.astype(np.float64), *net_hw)
        net_clicks = _scale_clicks(clicks, native_hw, net_hw)
    else:
        net_image = image.astype(np.float64)
        net_clicks = clicks
    click_map = encode_clicks(net_clicks, *net_hw)

    if cfg.prior_mode == "si":
        edge_prior = sobel_edge(net_image)
    elif cfg.prior_mode == "ei" and prev_pred is not None:
        prev = np.asarray(prev_pred, dtype=np.float64)
        if prev.ndim == 3:
            prev = prev[0]
        if prev.shape != net_hw:
            prev = _resize_array(prev[None], *net_hw)[0]
        edge_prior = extract_edge_mask(binarize(prev))[None]
    else:
        edge_prior = np.zeros((1,) + net_hw, dtype=np.float64)

    dt = np.float32
    out = forward_full(
        model,
        Tensor(net_image[None], dtype=dt),
        Tensor(click_map[None], dtype=dt),
        Tensor(edge_prior[None], dtype=dt) if cfg.use_edge_flow else None,
    )
    prob = 1.0 / (1.0 + np.exp(-out.final_logits.data[0].astype(np.float64)))
    if resample:
        prob = _resize_array(prob, *native_hw)
    prob = np.clip(prob[0], 0.0, 1.0)
    edge_mask = extract_edge_mask(binarize(prob))
    return prob, edge_mask


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path) -> None:
    """Versioned little-endian container: magic, version, config JSON, then
    named f32 blobs with explicit shapes."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = model.config.canonical_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError("truncated checkpoint file")
    return b


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        config = ModelConfig.from_dict(json.loads(_read_exact(f, cfg_len).decode("utf-8")))
        (n_params,) = struct.unpack("<I", _read_exact(f, 4))
        blobs = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4")
            blobs[name] = data.reshape(shape).astype(np.float32)
    model = build_model(config, seed=0)
    if set(blobs) != set(model.params):
        missing = sorted(set(model.params) - set(blobs))
        extra = sorted(set(blobs) - set(model.params))
        raise ValueError(f"checkpoint does not match config: missing={missing} extra={extra}")
    for name, arr in blobs.items():
        if arr.shape != model.params[name].shape:
            raise ValueError(
                f"checkpoint blob {name} has shape {arr.shape}, expected {model.params[name].shape}"
            )
        model.params[name].data = arr
    return model
