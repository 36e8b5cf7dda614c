"""Asymmetric masked-reconstruction transformer with pixel and edge heads."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .patching import MaskPlan, PatchGrid



def sobel(image: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude with replicate padding.

    Accepts a single 2D array or a stack (..., H, W); the last two axes are filtered.
    """
    x = np.asarray(image, dtype=np.float64)
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(x, pad, mode="edge")
    H, W = x.shape[-2:]

    def win(a, b):
        return p[..., a:a + H, b:b + W]

    # paired differences: a flat window gives exactly zero
    gx = (win(0, 2) - win(0, 0)) + 2.0 * (win(1, 2) - win(1, 0)) + (win(2, 2) - win(2, 0))
    gy = (win(2, 0) - win(0, 0)) + 2.0 * (win(2, 1) - win(0, 1)) + (win(2, 2) - win(0, 2))
    return np.sqrt(gx * gx + gy * gy)


def sincos_2d(embed_dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2D sine-cosine table, shape (grid_h * grid_w, embed_dim)."""
    assert embed_dim % 4 == 0
    quarter = embed_dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def one_axis(pos):
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.concatenate([one_axis(rows.ravel()), one_axis(cols.ravel())], axis=1)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, pad_mask=None):
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        if pad_mask is not None:
            att = att.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x, pad_mask=None):
        x = x + self.attn(self.norm1(x), pad_mask)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class MaskedReconstructor(nn.Module):
    def __init__(self, cfg: ModelConfig, image_shape: tuple[int, int]):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.image_shape = tuple(image_shape)
        P, D = cfg.patch_size, cfg.embed_dim
        gh, gw = image_shape[0] // P, image_shape[1] // P
        self.lattice = (gh, gw)
        patch_dim = P * P * cfg.in_chans

        self.patch_embed = nn.Linear(patch_dim, D)
        self.cls_token = nn.Parameter(torch.zeros(D))
        self.encoder = nn.ModuleList(Block(D, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth))
        self.encoder_norm = nn.LayerNorm(D)
        self.mask_token = nn.Parameter(torch.zeros(D))
        self.decoder = nn.ModuleList(Block(D, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth))
        self.pixel_head = nn.Linear(D, patch_dim)
        self.edge_head = nn.Linear(D, patch_dim)

        # slot 0 is the class token; lattice position p sits at slot p + 1
        table = np.concatenate([np.zeros((1, D)), sincos_2d(D, gh, gw)])
        self.register_buffer("enc_pos", torch.tensor(table, dtype=torch.float32))
        self.register_buffer("dec_pos", torch.tensor(table, dtype=torch.float32))

    @property
    def device(self):
        return self.cls_token.device

    @property
    def dtype(self):
        return self.cls_token.dtype

    def encode_batch(self, patch_lists, pos_lists):
        """Encode variable-length visible sets.

        patch_lists[b]: (n_b, P*P) array, pos_lists[b]: lattice indices.
        Returns padded (B, 1 + max n_b, D) tokens and the padding mask.
        """
        B = len(patch_lists)
        T = 1 + max(len(p) for p in pos_lists)
        D = self.cfg.embed_dim
        tokens = torch.zeros(B, T, D, dtype=self.dtype, device=self.device)
        pad = torch.ones(B, T, dtype=torch.bool, device=self.device)
        for b, (patches, pos) in enumerate(zip(patch_lists, pos_lists)):
            n = len(pos)
            x = torch.as_tensor(np.asarray(patches), dtype=self.dtype, device=self.device)
            idx = torch.as_tensor(np.asarray(pos, dtype=np.int64) + 1, device=self.device)
            tokens[b, 0] = self.cls_token + self.enc_pos[0]
            if n:
                tokens[b, 1:1 + n] = self.patch_embed(x) + self.enc_pos[idx]
            pad[b, : 1 + n] = False
        z = tokens
        for blk in self.encoder:
            z = blk(z, pad)
        return self.encoder_norm(z), pad

    def decode_batch(self, enc, enc_pad, enc_pos_lists, masked_pos_lists):
        """Predict pixel and edge vectors for each image's masked positions.

        Returns two lists of (m_b, P*P) tensors.
        """
        B = enc.shape[0]
        D = self.cfg.embed_dim
        n_enc = [len(p) + 1 for p in enc_pos_lists]
        n_mask = [len(p) for p in masked_pos_lists]
        T = max(a + m for a, m in zip(n_enc, n_mask))
        z = torch.zeros(B, T, D, dtype=self.dtype, device=self.device)
        pad = torch.ones(B, T, dtype=torch.bool, device=self.device)
        for b in range(B):
            a, m = n_enc[b], n_mask[b]
            slots = np.concatenate([[0], np.asarray(enc_pos_lists[b], dtype=np.int64) + 1])
            z[b, :a] = enc[b, :a] + self.dec_pos[torch.as_tensor(slots, device=self.device)]
            if m:
                mslots = torch.as_tensor(np.asarray(masked_pos_lists[b], dtype=np.int64) + 1, device=self.device)
                z[b, a:a + m] = self.mask_token + self.dec_pos[mslots]
            pad[b, : a + m] = False
        for blk in self.decoder:
            z = blk(z, pad)
        pix, edge = [], []
        for b in range(B):
            a, m = n_enc[b], n_mask[b]
            out = z[b, a:a + m]
            pix.append(self.pixel_head(out))
            edge.append(self.edge_head(out))
        return pix, edge

    def reconstruct_batch(self, items):
        """items: iterable of (patches (N, P*P), positions (N,), plan).

        Returns per-item (pixel, edge) tensors for plan.masked, in plan order.
        """
        items = list(items)
        vis_patches = [p[plan.visible] for p, _, plan in items]
        vis_pos = [pos[plan.visible] for _, pos, plan in items]
        mask_pos = [pos[plan.masked] for _, pos, plan in items]
        enc, pad = self.encode_batch(vis_patches, vis_pos)
        return self.decode_batch(enc, pad, vis_pos, mask_pos)


def _trunc_normal(rng: np.random.Generator, shape, std=0.02) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_model(cfg: ModelConfig, rng: np.random.Generator, image_shape=(256, 256)) -> MaskedReconstructor:
    """Truncated-normal (std 0.02) weights, zero biases, unit layer norms."""
    model = MaskedReconstructor(cfg, image_shape)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".norm" in name or name.startswith("encoder_norm"):
                p.fill_(1.0)
            else:
                p.copy_(torch.as_tensor(_trunc_normal(rng, tuple(p.shape)), dtype=p.dtype))
    return model


def parameter_count(cfg: ModelConfig) -> int:
    D, P, C = cfg.embed_dim, cfg.patch_size, cfg.in_chans
    pd = P * P * C
    hidden = int(D * cfg.mlp_ratio)
    block = 2 * D + (3 * D * D + 3 * D) + (D * D + D) + 2 * D + (D * hidden + hidden) + (hidden * D + D)
    return (
        (pd * D + D)
        + D  # class token
        + cfg.encoder_depth * block
        + 2 * D  # encoder norm
        + D  # mask token
        + cfg.decoder_depth * block
        + 2 * (D * pd + pd)
    )


def encode(model: MaskedReconstructor, image: np.ndarray, visible, grid: PatchGrid):
    visible = np.asarray(visible, dtype=int)
    if visible.size == 0:
        raise ValueError("encode needs at least one visible patch")
    patches = grid.extract(image)
    enc, _ = model.encode_batch([patches[visible]], [grid.positions[visible]])
    return enc[0]


def decode(model: MaskedReconstructor, embeddings, visible, masked, grid: PatchGrid):
    visible = np.asarray(visible, dtype=int)
    masked = np.asarray(masked, dtype=int)
    if np.intersect1d(visible, masked).size:
        raise ValueError("masked and visible patch sets overlap")
    pad = torch.zeros(1, embeddings.shape[0], dtype=torch.bool, device=embeddings.device)
    pix, edge = model.decode_batch(
        embeddings[None], pad, [grid.positions[visible]], [grid.positions[masked]]
    )
    return pix[0], edge[0]


def recon_loss(target, pixel_pred, edge_target, edge_pred, edge_weight: float):
    """Mean squared pixel error plus ``edge_weight`` times mean squared edge error.

    All arguments cover the masked patches only, shape (M, P*P).
    """
    if target.shape != pixel_pred.shape or edge_target.shape != edge_pred.shape:
        raise ValueError(
            f"shape mismatch: target {tuple(target.shape)} vs prediction {tuple(pixel_pred.shape)}"
        )
    mse = ((pixel_pred - target) ** 2).mean()
    edge = ((edge_pred - edge_target) ** 2).mean()
    return mse + edge_weight * edge


def patch_edge_targets(patches: np.ndarray, patch_size: int) -> np.ndarray:
    """Sobel magnitude of each patch, replicate-padded at the patch border."""
    P = patch_size
    stack = np.asarray(patches, dtype=np.float64).reshape(-1, P, P)
    return sobel(stack).reshape(len(stack), P * P)


@dataclass
class Reconstruction:
    recon_image: np.ndarray
    masked: np.ndarray
    pixel_pred: np.ndarray
    edge_pred: np.ndarray | None = None


def compose_reconstruction(x, pixel_pred, plan: MaskPlan, grid: PatchGrid, edge_pred=None) -> Reconstruction:
    x = np.asarray(x)
    pred = np.clip(np.asarray(pixel_pred, dtype=np.float64), 0.0, 1.0).astype(x.dtype)
    out = grid.scatter(pred, plan.masked, x) if len(plan.masked) else x.copy()
    return Reconstruction(out, np.asarray(plan.masked), np.asarray(pixel_pred), edge_pred)


# ---------------------------------------------------------------------------
# checkpoints: magic line, 8-byte header length, JSON header, raw tensor blob

MAGIC = b"U2ADCKPT1\n"


def _rng_state_digest(state) -> str:
    return hashlib.sha1(json.dumps(state, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, model: MaskedReconstructor, meta: dict, optimizer=None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        for i, group_state in enumerate(_optimizer_tensors(model, optimizer)):
            for key, val in group_state.items():
                tensors[f"opt.{i}.{key}"] = val
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": _plain(model.cfg),
        "image_shape": list(model.image_shape),
        "tensors": manifest,
        "meta": meta,
    }
    if "rng_state" in meta:
        header["rng_state_digest"] = _rng_state_digest(meta["rng_state"])
    if optimizer is not None:
        header["optimizer"] = {"lr": optimizer.param_groups[0]["lr"], "betas": list(optimizer.param_groups[0]["betas"])}
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def _plain(cfg):
    import dataclasses

    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def _optimizer_tensors(model, optimizer):
    out = []
    for p in model.parameters():
        st = optimizer.state.get(p, {})
        out.append({k: (v if torch.is_tensor(v) else torch.tensor(v)) for k, v in st.items()})
    return out


def load_checkpoint(path, optimizer_factory=None, device="cpu"):
    """Returns (model, meta, optimizer-or-None)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint")
    n = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])[0]
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + n])
    blob = memoryview(raw)[start + n:]
    mc = header["model_config"]
    cfg = ModelConfig(**mc)
    model = MaskedReconstructor(cfg, tuple(header["image_shape"]))
    tensors = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=entry["offset"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("=")).copy())
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    if state and next(iter(state.values())).dtype == torch.float64:
        model = model.double()
    model.load_state_dict(state)
    model.to(device)
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        params = list(model.parameters())
        for i, p in enumerate(params):
            st = {k.split(".", 2)[2]: v for k, v in tensors.items() if k.startswith(f"opt.{i}.")}
            if st:
                optimizer.state[p] = {k: v.to(device) for k, v in st.items()}
        if "optimizer" in header:
            for g in optimizer.param_groups:
                g["lr"] = header["optimizer"]["lr"]
    return model, header["meta"], optimizer


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha1()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
