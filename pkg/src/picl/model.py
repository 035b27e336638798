"""Encoder-decoder transformer over aligned patch sequences.

Two assemblies share one backbone. The parallel variant ("sep") runs the
input track and the masked target track through the first blocks
side by side, averages them positionwise, and finishes with the remaining
blocks. The concatenated variant ("cat") runs one long track. Masked
positions enter as a learned mask token with no coordinate information
attached, so masked target content can never reach the output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sampling import PatchSequence

__all__ = [
    "ModelConfig",
    "ModelState",
    "ForwardResult",
    "init_params",
    "embed_patch",
    "forward",
    "forward_batch",
    "backward",
    "save_checkpoint",
    "load_checkpoint",
]

ROLE_NAMES = ("prompt-input", "prompt-target", "query-input", "query-target")


@dataclass
class ModelConfig:
    feature_dim: int = 96
    encoder_depth: int = 4
    decoder_depth: int = 2
    heads: int = 4
    variant: str = "sep"
    merge_block: int | None = None  # sep only; defaults to encoder_depth // 2
    n_c: int = 64
    m: int = 32
    mask_ratio: float = 0.7
    n_points: int = 1024
    prompt_position: str = "before"
    target_pos_embed_visible: bool = False
    embed_hidden: int = 48
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim % self.heads:
            raise ValueError("feature_dim must be divisible by heads")
        if self.variant not in ("sep", "cat"):
            raise ValueError(f"variant must be 'sep' or 'cat', got {self.variant!r}")
        if self.prompt_position not in ("before", "behind"):
            raise ValueError("prompt_position must be 'before' or 'behind'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if self.merge_block is not None and not 0 < self.merge_block < self.encoder_depth:
            raise ValueError("merge_block must lie in (0, encoder_depth)")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask_ratio must lie in [0, 1]")

    @property
    def merge_at(self) -> int:
        return self.merge_block if self.merge_block is not None else self.encoder_depth // 2

    @property
    def n_blocks(self) -> int:
        return self.encoder_depth + self.decoder_depth

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelState:
    """Named parameter arrays plus the config that shaped them."""

    config: ModelConfig
    params: dict = field(default_factory=dict)

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})


def _param_shapes(config: ModelConfig) -> dict:
    d, he, m = config.feature_dim, config.embed_hidden, config.m
    shapes = {
        "embed.w1": (3, he),
        "embed.b1": (he,),
        "embed.w2": (he, d),
        "embed.b2": (d,),
        "pos.w": (3, d),
        "pos.b": (d,),
        "seg": (4, d),
        "mask_token": (d,),
        "final_ln.g": (d,),
        "final_ln.b": (d,),
        "head.w": (d, 3 * m),
        "head.b": (3 * m,),
    }
    for i in range(config.n_blocks):
        prefix = f"blocks.{i}."
        shapes[prefix + "ln1.g"] = (d,)
        shapes[prefix + "ln1.b"] = (d,)
        shapes[prefix + "attn.wqkv"] = (d, 3 * d)
        shapes[prefix + "attn.bqkv"] = (3 * d,)
        shapes[prefix + "attn.wo"] = (d, d)
        shapes[prefix + "attn.bo"] = (d,)
        shapes[prefix + "ln2.g"] = (d,)
        shapes[prefix + "ln2.b"] = (d,)
        shapes[prefix + "mlp.w1"] = (d, 4 * d)
        shapes[prefix + "mlp.b1"] = (4 * d,)
        shapes[prefix + "mlp.w2"] = (4 * d, d)
        shapes[prefix + "mlp.b2"] = (d,)
    return shapes


def init_params(config: ModelConfig) -> ModelState:
    """Deterministic initialization: weights at 1/sqrt(fan_in) scale,
    embeddings and the mask token from a small-variance normal."""
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith((".g",)):
            params[name] = np.ones(shape, dtype=dt)
        elif name.endswith((".b", ".b1", ".b2", ".bqkv", ".bo")) or name.endswith("ln1.b"):
            params[name] = np.zeros(shape, dtype=dt)
        elif name in ("seg", "mask_token"):
            params[name] = rng.normal(0.0, 0.02, shape).astype(dt)
        else:
            fan_in = shape[0]
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape).astype(dt)
    return ModelState(config, params)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _wrap_params(state: ModelState, record: bool) -> dict:
    return {k: Tensor(v, requires=record) for k, v in state.params.items()}


def _embed_patches(p: dict, patches: Tensor) -> Tensor:
    """Pointwise two-layer map then coordinate-wise max over the patch."""
    h = ad.gelu(patches @ p["embed.w1"] + p["embed.b1"])
    h = h @ p["embed.w2"] + p["embed.b2"]
    return h.max(axis=-2)


def _block(p: dict, i: int, x: Tensor, heads: int) -> Tensor:
    prefix = f"blocks.{i}."
    b, t, d = x.shape
    dh = d // heads
    h = ad.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    qkv = h @ p[prefix + "attn.wqkv"] + p[prefix + "attn.bqkv"]
    qkv = qkv.reshape(b, t, 3, heads, dh).transpose((2, 0, 3, 1, 4))
    q = qkv.slice_axis(0, 0, 1).reshape(b, heads, t, dh)
    k = qkv.slice_axis(0, 1, 2).reshape(b, heads, t, dh)
    v = qkv.slice_axis(0, 2, 3).reshape(b, heads, t, dh)
    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1) @ v
    attn = attn.transpose((0, 2, 1, 3)).reshape(b, t, d)
    x = x + (attn @ p[prefix + "attn.wo"] + p[prefix + "attn.bo"])
    h2 = ad.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    mlp = ad.gelu(h2 @ p[prefix + "mlp.w1"] + p[prefix + "mlp.b1"])
    mlp = mlp @ p[prefix + "mlp.w2"] + p[prefix + "mlp.b2"]
    return x + mlp


def _track_layout(config: ModelConfig):
    """Role ids per track position. Roles: 0 pi, 1 pt, 2 qi, 3 qt."""
    before = config.prompt_position == "before"
    if config.variant == "sep":
        input_roles = [0, 2] if before else [2, 0]
        target_roles = [1, 3] if before else [3, 1]
        return input_roles, target_roles
    roles = [0, 1, 2, 3] if before else [2, 3, 0, 1]
    return roles, None


def _role_array(values_by_role, roles, axis_concat=1):
    return np.concatenate([values_by_role[r] for r in roles], axis=axis_concat)


def _build_track(
    p: dict,
    patches_track: np.ndarray,
    centers_track: np.ndarray,
    roles: "list[int]",
    mask_track: np.ndarray,
    config: ModelConfig,
):
    """Token array (B, T, D) honoring the visibility rules.

    Visible tokens: patch embedding, plus the positional embedding of their
    own center when the role allows it, plus the role's segment embedding.
    Masked tokens: mask token + segment embedding only; their patch and
    center never enter the computation.
    """
    b, t = mask_track.shape
    n_c = config.n_c
    dt = config.np_dtype
    order = np.argsort(mask_track, axis=1, kind="stable")
    n_vis = t - int(mask_track[0].sum())
    vis_idx = order[:, :n_vis]
    rows = np.arange(b)[:, None]
    # role-dependent positional rule, evaluated on visible positions only
    role_per_pos = np.repeat(np.asarray(roles), n_c)
    wants_pos = np.where(
        np.isin(role_per_pos, (0, 2)), True, config.target_pos_embed_visible
    )
    seg_track = ad.index_select(p["seg"], role_per_pos, axis=0)
    mask_f = mask_track.astype(dt)[:, :, None]
    masked_part = Tensor(mask_f) * p["mask_token"]
    if n_vis == 0:
        return masked_part + seg_track
    vis_patches = patches_track[rows, vis_idx].astype(dt)
    vis_centers = centers_track[rows, vis_idx].astype(dt)
    emb = _embed_patches(p, Tensor(vis_patches))
    pos = Tensor(vis_centers) @ p["pos.w"] + p["pos.b"]
    pos_gate = wants_pos[vis_idx].astype(dt)[:, :, None]
    tokens = emb + pos * Tensor(pos_gate)
    return ad.scatter_tokens(tokens, vis_idx, t) + masked_part + seg_track


@dataclass
class ForwardResult:
    """Predictions for masked positions plus everything needed to use them.

    patches: (B, K, M, 3) predicted coordinates (Tensor when recorded)
    masked_positions: (B, K) target-track positions of each prediction
    gt_patches: (B, K, M, 3) the true patches at those positions
    track_roles: role id per target-track position
    param_tensors: name -> Tensor handles when recorded, else None
    """

    patches: "Tensor | np.ndarray"
    masked_positions: np.ndarray
    gt_patches: np.ndarray
    track_roles: np.ndarray
    param_tensors: dict | None = None

    @property
    def recorded(self) -> bool:
        return self.param_tensors is not None

    def numpy_patches(self) -> np.ndarray:
        return self.patches.data if isinstance(self.patches, Tensor) else self.patches


def forward_batch(
    state: ModelState,
    patches: np.ndarray,
    centers: np.ndarray,
    mask_track: np.ndarray,
    record: bool = False,
) -> ForwardResult:
    """Batched forward pass.

    patches: (B, 4, N_C, M, 3) in role order (pi, pt, qi, qt)
    centers: (B, 4, N_C, 3) matching centers
    mask_track: (B, T) boolean; T = 2*N_C for sep (target track),
                4*N_C for cat (whole track); same count per row.
    """
    config = state.config
    n_c = config.n_c
    b = patches.shape[0]
    counts = mask_track.sum(axis=1)
    if b and not np.all(counts == counts[0]):
        raise ValueError("every sample in a batch must mask the same number of positions")
    p = _wrap_params(state, record)
    by_role_patches = {r: patches[:, r] for r in range(4)}
    by_role_centers = {r: centers[:, r] for r in range(4)}

    if config.variant == "sep":
        input_roles, target_roles = _track_layout(config)
        t = 2 * n_c
        if mask_track.shape != (b, t):
            raise ValueError(f"sep variant expects mask of shape {(b, t)}, got {mask_track.shape}")
        in_patches = _role_array(by_role_patches, input_roles)
        in_centers = _role_array(by_role_centers, input_roles)
        tg_patches = _role_array(by_role_patches, target_roles)
        tg_centers = _role_array(by_role_centers, target_roles)
        no_mask = np.zeros((b, t), dtype=bool)
        input_track = _build_track(p, in_patches, in_centers, input_roles, no_mask, config)
        target_track = _build_track(p, tg_patches, tg_centers, target_roles, mask_track, config)
        # both tracks share the blocks before the merge; stack them so each
        # block runs once on a (2B, T, D) batch
        x = ad.concat([input_track, target_track], axis=0)
        for i in range(config.merge_at):
            x = _block(p, i, x, config.heads)
        x = (x.slice_axis(0, 0, b) + x.slice_axis(0, b, 2 * b)) * 0.5
        for i in range(config.merge_at, config.n_blocks):
            x = _block(p, i, x, config.heads)
        track_roles = np.repeat(np.asarray(target_roles), n_c)
        track_patches = tg_patches
    else:
        roles, _ = _track_layout(config)
        t = 4 * n_c
        if mask_track.shape != (b, t):
            raise ValueError(f"cat variant expects mask of shape {(b, t)}, got {mask_track.shape}")
        cat_patches = _role_array(by_role_patches, roles)
        cat_centers = _role_array(by_role_centers, roles)
        x = _build_track(p, cat_patches, cat_centers, roles, mask_track, config)
        for i in range(config.n_blocks):
            x = _block(p, i, x, config.heads)
        track_roles = np.repeat(np.asarray(roles), n_c)
        track_patches = cat_patches

    x = ad.layer_norm(x, p["final_ln.g"], p["final_ln.b"])
    out = x @ p["head.w"] + p["head.b"]

    order = np.argsort(mask_track, axis=1, kind="stable")
    k = int(mask_track[0].sum())
    masked_idx = order[:, mask_track.shape[1] - k :]
    rows = np.arange(b)[:, None]
    pred = ad.gather_tokens(out, masked_idx).reshape(b, k, config.m, 3)
    gt = track_patches[rows, masked_idx]
    return ForwardResult(
        patches=pred if record else pred.data,
        masked_positions=masked_idx,
        gt_patches=gt,
        track_roles=track_roles,
        param_tensors=p if record else None,
    )


def _stack_sequences(seqs: "tuple[PatchSequence, ...]"):
    patches = np.stack([s.patches for s in seqs])[None]
    centers = np.stack([s.centers for s in seqs])[None]
    return patches, centers


def forward(
    state: ModelState,
    seqs: "tuple[PatchSequence, PatchSequence, PatchSequence, PatchSequence]",
    mask_track: np.ndarray,
    record: bool = False,
) -> ForwardResult:
    """Single-sample forward: four patch sequences in (pi, pt, qi, qt) order."""
    if len(seqs) != 4:
        raise ValueError("forward expects the four patch sequences of one sample")
    for s in seqs:
        if s.n_centers != state.config.n_c or s.patches.shape[1] != state.config.m:
            raise ValueError(
                f"sequence shape ({s.n_centers} centers, {s.patches.shape[1]} neighbors) "
                f"does not match config (n_c={state.config.n_c}, m={state.config.m})"
            )
    patches, centers = _stack_sequences(seqs)
    result = forward_batch(state, patches, centers, np.asarray(mask_track, bool)[None], record)
    result.masked_positions = result.masked_positions[0]
    result.gt_patches = result.gt_patches[0]
    if isinstance(result.patches, Tensor):
        result.patches = result.patches.reshape(*result.patches.shape[1:])
    else:
        result.patches = result.patches[0]
    return result


def embed_patch(state: ModelState, patch: np.ndarray, record: bool = False):
    """Embed one M x 3 patch; permutation invariant over its points.

    With ``record`` returns (Tensor, input Tensor) so gradients with
    respect to the patch coordinates can be checked.
    """
    patch = np.asarray(patch, dtype=state.config.np_dtype)
    if patch.ndim != 2 or patch.shape[1] != 3:
        raise ValueError("patch must be (M, 3)")
    p = _wrap_params(state, record=False)
    x = Tensor(patch, requires=record)
    out = _embed_patches(p, x)
    if record:
        return out, x
    return out.data


def backward(loss: Tensor, result: ForwardResult) -> dict:
    """Gradients of a scalar loss for every parameter, by name.

    Requires a forward pass run with ``record=True``.
    """
    if not result.recorded:
        raise ValueError("no recorded graph: run forward with record=True")
    ad.backward(loss)
    grads = {}
    for name, tensor in result.param_tensors.items():
        grads[name] = (
            tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        )
    return grads


# ---------------------------------------------------------------------------
# checkpoints: named-tensor container, little-endian f32 payload
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"PICK"
_CKPT_VERSION = 1


def save_checkpoint(
    path: str,
    state: ModelState,
    extra_config: dict | None = None,
    extra_tensors: dict | None = None,
) -> None:
    """Write the model (plus optional extra tensors) with a config echo."""
    meta = {"model": state.config.to_dict()}
    if extra_config:
        meta.update(extra_config)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tensors = dict(state.params)
    if extra_tensors:
        for name, arr in extra_tensors.items():
            if name in tensors:
                raise ValueError(f"duplicate tensor name {name!r}")
            tensors[name] = arr
    chunks = [_CKPT_MAGIC, struct.pack("<HI", _CKPT_VERSION, len(blob)), blob]
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str):
    """Read a checkpoint; returns (ModelState, meta dict, extra tensors).

    Shape mismatches raise with the offending tensor named.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {data[:4]!r}")
    pos = 4
    version, blob_len = struct.unpack_from("<HI", data, pos)
    pos += 6
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    meta = json.loads(data[pos : pos + blob_len].decode("utf-8"))
    pos += blob_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        tensors[name] = arr.copy()
    if pos != len(data):
        raise ValueError(f"trailing bytes in checkpoint at offset {pos}")

    config = ModelConfig.from_dict(meta["model"])
    expected = _param_shapes(config)
    params = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        arr = tensors.pop(name)
        if arr.shape != shape:
            raise ValueError(
                f"tensor {name!r} has shape {arr.shape}, config requires {shape}"
            )
        params[name] = arr.astype(config.np_dtype)
    state = ModelState(config, params)
    return state, meta, tensors
