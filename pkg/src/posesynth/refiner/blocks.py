"""Conditioning encoders, embeddings and the three attention variants."""

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from posesynth._validation import InvalidArgumentError, check_rotation

COND_CHANNELS = (16, 16, 32, 32, 96, 96, 256, 320)
EMBED_DIM = 1024
GEO_KINDS = ("texture", "normal", "semantic")


def zero_module(module):
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ConditionEncoder(nn.Module):
    """3x3 stride-1 conv stack 4 -> 16 -> ... -> 320 with SiLU; the last conv starts at zero."""

    def __init__(self, in_channels=4, channels=COND_CHANNELS):
        super().__init__()
        self.in_channels = in_channels
        convs = []
        c = in_channels
        for out in channels:
            convs.append(nn.Conv2d(c, out, 3, padding=1))
            c = out
        zero_module(convs[-1])
        self.convs = nn.ModuleList(convs)

    @property
    def channel_sequence(self):
        return tuple(conv.out_channels for conv in self.convs)

    def forward(self, latent):
        if latent.ndim != 4 or latent.shape[1] != self.in_channels:
            raise InvalidArgumentError(f"condition encoder expects {self.in_channels} channels, got {tuple(latent.shape)}")
        h = latent
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.silu(h)
        return h


def attention(q, k, v, return_weights=False):
    """Softmax attention over the token axis. ``q`` (B, Nq, C), ``k``/``v`` (B, Nk, C)."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class TokenAttention(nn.Module):
    """Pre-norm single-head attention with a zero-initialised output projection.

    ``forward(tokens, context)`` returns the residual update for ``tokens``;
    keys and values come from ``context`` (defaults to ``tokens``).
    """

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        self.out = zero_module(nn.Linear(channels, channels))
        self.last_weights = None
        self.keep_weights = False

    def forward(self, tokens, context=None):
        x = self.norm(tokens)
        ctx = x if context is None else self.norm(context)
        out, w = attention(self.q(x), self.k(ctx), self.v(ctx), return_weights=True)
        if self.keep_weights:
            self.last_weights = w.detach()
        return self.out(out)


def _tokens(feat):
    """(B, C, h, w) -> (B, h*w, C)"""
    return feat.flatten(2).transpose(1, 2)


def _untokens(tok, h, w):
    return tok.transpose(1, 2).reshape(tok.shape[0], -1, h, w)


class CallCounter:
    """Counts forward calls of the view-mixing layers (instrumentation for tests)."""

    calls = {"view_1d": 0, "multiview": 0}

    @classmethod
    def reset(cls):
        for k in cls.calls:
            cls.calls[k] = 0

    @classmethod
    def total(cls):
        return sum(cls.calls.values())


class ViewAttention1D(nn.Module):
    """Attention across views at each pixel; pixels never mix."""

    def __init__(self, channels):
        super().__init__()
        self.attn = TokenAttention(channels)

    def forward(self, feat):
        CallCounter.calls["view_1d"] += 1
        V, C, h, w = feat.shape
        tok = feat.permute(2, 3, 0, 1).reshape(h * w, V, C)
        tok = tok + self.attn(tok)
        return tok.reshape(h, w, V, C).permute(2, 3, 0, 1)


def sparse_views(n_views, stride):
    """Every ``stride``-th view index, always starting at view 0."""
    return list(range(0, n_views, max(int(stride), 1)))


class MultiViewAttention(nn.Module):
    """Joint spatial and view attention among a sparse subset of views.

    Views outside the subset pass through unchanged.
    """

    def __init__(self, channels, stride=2):
        super().__init__()
        self.attn = TokenAttention(channels)
        self.stride = stride

    def forward(self, feat):
        CallCounter.calls["multiview"] += 1
        V, C, h, w = feat.shape
        sel = sparse_views(V, self.stride)
        sub = feat[sel]
        tok = _tokens(sub).reshape(1, len(sel) * h * w, C)
        upd = self.attn(tok).reshape(len(sel), h * w, C)
        upd = _untokens(upd, h, w)
        out = feat.clone()
        out[sel] = sub + upd
        return out


class ReferenceAttention(nn.Module):
    """Self-attention over each view's tokens joined with the reference tokens.

    The reference map is shared by every view; only the view tokens are kept.
    """

    def __init__(self, channels):
        super().__init__()
        self.attn = TokenAttention(channels)

    def forward(self, feat, ref):
        V, C, h, w = feat.shape
        if ref is None:
            ref = feat.new_zeros(1, C, h, w)
        if ref.ndim == 3:
            ref = ref[None]
        if ref.shape[1:] != feat.shape[1:]:
            raise InvalidArgumentError(f"reference features {tuple(ref.shape)} do not match layer {tuple(feat.shape)}")
        main = _tokens(feat)
        ctx = torch.cat([main, _tokens(ref).expand(V, -1, -1)], dim=1)
        return feat + _untokens(self.attn(main, ctx), h, w)


class SpatialSelfAttention(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.attn = TokenAttention(channels)

    def forward(self, feat):
        h, w = feat.shape[-2:]
        tok = _tokens(feat)
        return feat + _untokens(self.attn(tok), h, w)


class GeometryBranch(nn.Module):
    """One condition map type: 4 convs down to latent resolution, self-attention, zero 1x1 conv."""

    def __init__(self, out_channels=320, widths=(16, 32, 64, 128), downsample=8):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        if 2**n_down != downsample or n_down > len(widths):
            raise InvalidArgumentError("geometry branch downsample must be a power of two <= 2^4")
        layers = []
        c = 3
        # the last n_down convs are strided
        for i, wd in enumerate(widths):
            stride = 2 if i >= len(widths) - n_down else 1
            layers += [nn.Conv2d(c, wd, 3, stride=stride, padding=1), nn.SiLU()]
            c = wd
        self.convs = nn.Sequential(*layers)
        self.attn = SpatialSelfAttention(c)
        self.out = zero_module(nn.Conv2d(c, out_channels, 1))

    def forward(self, cond):
        return self.out(self.attn(self.convs(cond * 2.0 - 1.0)))


class MultiLayerGeometryFusion(nn.Module):
    """Sum of per-map branches over texture, normal and semantic condition maps."""

    def __init__(self, out_channels=320, downsample=8, kinds=GEO_KINDS):
        super().__init__()
        unknown = set(kinds) - set(GEO_KINDS)
        if unknown:
            raise InvalidArgumentError(f"unknown geometry condition kinds {sorted(unknown)}")
        self.kinds = tuple(kinds)
        self.branches = nn.ModuleDict({k: GeometryBranch(out_channels, downsample=downsample) for k in GEO_KINDS})

    def forward(self, cond):
        """``cond`` maps kind -> (V, 3, H, W) in [0, 1]."""
        missing = [k for k in self.kinds if k not in cond or cond[k] is None]
        if missing:
            raise InvalidArgumentError(f"missing condition maps: {missing}")
        total = None
        for k in self.kinds:
            out = self.branches[k](cond[k])
            total = out if total is None else total + out
        return total


def camera_vector(R, t, rotation_only=False):
    """Row-major flatten of ``[R | t]`` (12 values) or of ``R`` alone (9)."""
    R = check_rotation(np.asarray(R, dtype=np.float64), tol=1e-4)
    t = np.asarray(t, dtype=np.float64).reshape(3)
    if rotation_only:
        return R.reshape(9)
    return np.concatenate([R, t[:, None]], axis=1).reshape(12)


class CameraEmbedding(nn.Module):
    """Two-layer MLP 12 (or 9) -> 1024 -> 1024."""

    def __init__(self, in_dim=12, dim=EMBED_DIM):
        super().__init__()
        if in_dim not in (9, 12):
            raise InvalidArgumentError("camera embedding input must be 9 (rotation) or 12 (rotation + translation)")
        self.in_dim = in_dim
        self.fc1 = nn.Linear(in_dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, vec):
        if vec.shape[-1] != self.in_dim:
            raise InvalidArgumentError(f"camera vector has {vec.shape[-1]} entries, expected {self.in_dim}")
        return self.fc2(F.silu(self.fc1(vec)))

    def embed_cameras(self, cameras, dtype=torch.float32):
        vecs = np.stack([camera_vector(c.R, c.t, rotation_only=self.in_dim == 9) for c in cameras])
        return self(torch.as_tensor(vecs, dtype=dtype))


def sinusoidal_embedding(t, dim=320, max_period=10000.0):
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim=EMBED_DIM, freq_dim=320):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = nn.Linear(freq_dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        h = sinusoidal_embedding(t, self.freq_dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(h)))


def combine_embeddings(f_cam, f_time):
    if f_cam.shape[-1] != f_time.shape[-1]:
        raise InvalidArgumentError(f"embedding widths differ: {f_cam.shape[-1]} vs {f_time.shape[-1]}")
    return f_cam + f_time
