"""RoI max pooling of per-ball features and the convolutional interaction network.

Per ball ``i`` and frame ``t``::

    e_i = f_A(f_O(b_i) + sum_{j != i} f_R(b_i, b_j))
    z_i = f_Z(b_i, e_i)
    b_i(t+1) = f_P(z_i(t), ..., z_i(t - T_ref + 1))

Pooled features live on a ``roi_size x roi_size`` grid; every f_* is a small
conv block on that grid.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

N_BALLS = 3
# ordered pairs (i, j), i != j, grouped by i
_PAIR_I = [0, 0, 1, 1, 2, 2]
_PAIR_J = [1, 2, 0, 2, 0, 1]


def bin_edges(lo: torch.Tensor, hi: torch.Tensor, roi_size: int, limit: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Integer cell ranges ``[start, end)`` of each bin along one axis.

    ``lo``/``hi`` are box edges in map coordinates, shape ``(N,)``; the result
    has shape ``(N, roi_size)``. Bins are snapped outward and always cover at
    least one cell of the map.
    """
    j = torch.arange(roi_size, dtype=lo.dtype)
    width = hi - lo
    b_lo = lo[:, None] + j * width[:, None] / roi_size
    b_hi = lo[:, None] + (j + 1) * width[:, None] / roi_size
    start = torch.floor(b_lo).long().clamp(0, limit - 1)
    end = torch.ceil(b_hi).long()
    end = torch.maximum(end, start + 1).clamp(max=limit)
    return start, end


def roi_pool_batch(maps: torch.Tensor, boxes: torch.Tensor, roi_size: int, spatial_scale: float) -> torch.Tensor:
    """Max-pool ``roi_size x roi_size`` grids for boxes over a batch of maps.

    ``maps``: (B, C, H, W); ``boxes``: (B, N, 4) in frame pixels
    ``(x_min, y_min, x_max, y_max)``; returns (B, N, C, k, k).
    """
    bsz, channels, h, w = maps.shape
    n = boxes.shape[1]
    flat = boxes.reshape(-1, 4).to(torch.float64) * spatial_scale
    degenerate = (flat[:, 2] <= flat[:, 0]) | (flat[:, 3] <= flat[:, 1])
    if bool(degenerate.any()):
        log.warning("%d degenerate boxes expanded to one cell", int(degenerate.sum()))
    xs, xe = bin_edges(flat[:, 0], flat[:, 2], roi_size, w)
    ys, ye = bin_edges(flat[:, 1], flat[:, 3], roi_size, h)
    cols = torch.arange(w)
    rows = torch.arange(h)
    col_mask = (cols >= xs[..., None]) & (cols < xe[..., None])  # (BN, k, W)
    row_mask = (rows >= ys[..., None]) & (rows < ye[..., None])  # (BN, k, H)

    src = maps.unsqueeze(1).expand(bsz, n, channels, h, w).reshape(bsz * n, channels, h, w)
    neg = torch.finfo(maps.dtype).min
    # max over columns of each x-bin: (BN, C, H, k)
    colmax = src.unsqueeze(-2).masked_fill(~col_mask[:, None, None, :, :], neg).amax(-1)
    # then over rows of each y-bin: (BN, C, k, k)
    out = colmax.unsqueeze(-3).masked_fill(~row_mask[:, None, :, :, None], neg).amax(-2)
    return out.reshape(bsz, n, channels, roi_size, roi_size)


def roi_pool(feature_map: torch.Tensor, box, roi_size: int = 4, downsample_factor: int = 4) -> torch.Tensor:
    """Pool a single box from a (C, H, W) map; ``box`` is in frame pixels."""
    box_t = torch.as_tensor(box, dtype=torch.float64).reshape(1, 1, 4)
    return roi_pool_batch(feature_map[None], box_t, roi_size, 1.0 / downsample_factor)[0, 0]


def roi_pool_reference(feature_map, box, roi_size: int = 4, downsample_factor: int = 4):
    """Loop-by-loop RoI max pooling used to cross-check :func:`roi_pool`."""
    import numpy as np

    fmap = np.asarray(feature_map)
    channels, h, w = fmap.shape
    scale = 1.0 / downsample_factor
    x0, y0, x1, y1 = (float(v) * scale for v in box)
    out = np.empty((channels, roi_size, roi_size), dtype=fmap.dtype)
    for by in range(roi_size):
        ylo = y0 + by * (y1 - y0) / roi_size
        yhi = y0 + (by + 1) * (y1 - y0) / roi_size
        r0 = min(max(math.floor(ylo), 0), h - 1)
        r1 = min(max(math.ceil(yhi), r0 + 1), h)
        for bx in range(roi_size):
            xlo = x0 + bx * (x1 - x0) / roi_size
            xhi = x0 + (bx + 1) * (x1 - x0) / roi_size
            c0 = min(max(math.floor(xlo), 0), w - 1)
            c1 = min(max(math.ceil(xhi), c0 + 1), w)
            for c in range(channels):
                best = fmap[c, r0, c0]
                for yy in range(r0, r1):
                    for xx in range(c0, c1):
                        if fmap[c, yy, xx] > best:
                            best = fmap[c, yy, xx]
                out[c, by, bx] = best
    return out


def grid_shift_tensor(k: int) -> torch.Tensor:
    """(9, k*k, k*k) selector: tap ``t`` of a zero-padded 3x3 kernel moves cell p to cell q."""
    s = torch.zeros(9, k * k, k * k)
    for ky in range(3):
        for kx in range(3):
            for y in range(k):
                for x in range(k):
                    yy, xx = y + ky - 1, x + kx - 1
                    if 0 <= yy < k and 0 <= xx < k:
                        s[ky * 3 + kx, yy * k + xx, y * k + x] = 1.0
    return s


class GridConv(nn.Module):
    """3x3 zero-padded convolution on a fixed ``k x k`` grid.

    Parameters have the usual ``nn.Conv2d`` layout; :meth:`operator` turns
    them into one dense ``(Cin*k*k, Cout*k*k)`` matrix acting on
    channel-major flattened features, so a rollout builds it once and then
    applies it with a single matmul per step.
    """

    def __init__(self, cin: int, cout: int, k: int, bias: bool = True):
        super().__init__()
        ref = nn.Conv2d(cin, cout, 3, padding=1, bias=bias)
        self.weight = ref.weight
        self.bias = ref.bias
        self.k = k
        self.register_buffer("shift", grid_shift_tensor(k), persistent=False)

    def operator(self) -> tuple[torch.Tensor, torch.Tensor | None]:
        cout, cin = self.weight.shape[:2]
        kk = self.k * self.k
        op = torch.einsum("oct,tpq->cpoq", self.weight.reshape(cout, cin, 9), self.shift.to(self.weight.dtype))
        bias = None if self.bias is None else self.bias.repeat_interleave(kk)
        return op.reshape(cin * kk, cout * kk), bias

    def forward(self, x):
        # (N, Cin, k, k) -> (N, Cout, k, k), same result as F.conv2d(x, w, b, padding=1)
        op, bias = self.operator()
        y = x.reshape(x.shape[0], -1) @ op
        if bias is not None:
            y = y + bias
        return y.reshape(x.shape[0], -1, self.k, self.k)


class ConvBlock(nn.Module):
    """conv3x3 -> ReLU -> conv3x3 -> ReLU on the RoI grid."""

    def __init__(self, cin: int, cout: int, k: int):
        super().__init__()
        self.conv1 = GridConv(cin, cout, k)
        self.conv2 = GridConv(cout, cout, k)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


@dataclass
class CINWeights:
    """Dense operators of the five networks and the box decoder for one forward pass.

    Every first layer that reads ``b`` (f_R, f_O and the b-half of f_Z) is
    applied through one stacked operator ``first`` with column blocks
    ``[f_R on b_i | f_R on b_j | f_O | f_Z on b]``.
    """

    channels: int
    k: int
    first: torch.Tensor
    first_bias: torch.Tensor
    r2: tuple
    o2: tuple
    a1: tuple
    a2: tuple
    z_e: torch.Tensor
    z2: tuple
    p1: tuple
    p2: tuple
    decoder: nn.Linear

    @property
    def dim(self) -> int:
        return self.channels * self.k * self.k


def _lin(x, op_bias):
    op, bias = op_bias
    y = x @ op
    return y if bias is None else y + bias


def cin_step(b: torch.Tensor, w: CINWeights) -> tuple[torch.Tensor, torch.Tensor]:
    """One interaction step on flattened ball features ``b`` of shape (..., 3, C*k*k).

    Returns ``(e, z)`` with the same shape.
    """
    d = w.dim
    first = b @ w.first + w.first_bias
    r_self, r_other, o_pre, z_pre = first.split(d, dim=-1)
    # f_R(b_i, b_j) for ordered pairs, summed over j != i
    pair = F.relu(r_self[..., _PAIR_I, :] + r_other[..., _PAIR_J, :])
    rel = F.relu(_lin(pair, w.r2))
    rel = rel.reshape(*rel.shape[:-2], N_BALLS, N_BALLS - 1, d).sum(-2)
    own = F.relu(_lin(F.relu(o_pre), w.o2))
    e = F.relu(_lin(F.relu(_lin(own + rel, w.a1)), w.a2))
    z = F.relu(_lin(F.relu(z_pre + e @ w.z_e), w.z2))
    return e, z


def decode(b: torch.Tensor, w: CINWeights) -> torch.Tensor:
    """Normalized ``(cx, cy, w, h)`` per flattened ball feature, clamped to [0, 1]."""
    pooled = b.reshape(*b.shape[:-1], w.channels, w.k * w.k).mean(-1)
    return torch.sigmoid(w.decoder(pooled)).clamp(0.0, 1.0)


def predict_next(z_history: torch.Tensor, w: CINWeights) -> tuple[torch.Tensor, torch.Tensor]:
    """``z_history``: (B, T_ref, 3, D), oldest first -> next features (B, 3, D) and boxes (B, 3, 4)."""
    t_ref = w.p1[0].shape[0] // w.dim
    if z_history.shape[1] != t_ref:
        raise ValueError(f"history length {z_history.shape[1]} != {t_ref}")
    # newest first along channels: f_P(z_t, z_{t-1}, ...)
    stacked = torch.cat(z_history.flip(1).unbind(1), dim=-1)
    b_next = F.relu(_lin(F.relu(_lin(stacked, w.p1)), w.p2))
    return b_next, decode(b_next, w)


def rollout(b_ref: torch.Tensor, w: CINWeights, horizon: int) -> torch.Tensor:
    """Autoregressive prediction from flattened reference features (B, T_ref, 3, D).

    Predicted features, not re-pooled ones, feed the next step. Returns
    boxes of shape (B, horizon, 3, 4).
    """
    t_ref = b_ref.shape[1]
    _, z = cin_step(b_ref, w)
    history = list(z.unbind(1))
    boxes = []
    for _ in range(horizon):
        b_next, box = predict_next(torch.stack(history[-t_ref:], dim=1), w)
        boxes.append(box)
        history.append(cin_step(b_next, w)[1])
    if not boxes:
        return b_ref.new_zeros((b_ref.shape[0], 0, N_BALLS, 4))
    return torch.stack(boxes, dim=1)


class InteractionNetwork(nn.Module):
    """Parameters of f_O, f_R, f_A, f_Z, f_P and the box decoder."""

    def __init__(self, channels: int, t_ref: int = 4, roi_size: int = 4):
        super().__init__()
        self.channels = channels
        self.t_ref = t_ref
        self.roi_size = roi_size
        k = roi_size
        self.f_O = ConvBlock(channels, channels, k)
        self.f_R = ConvBlock(2 * channels, channels, k)
        self.f_A = ConvBlock(channels, channels, k)
        self.f_Z = ConvBlock(2 * channels, channels, k)
        self.f_P = ConvBlock(t_ref * channels, channels, k)
        self.decoder = nn.Linear(channels, 4)

    def weights(self) -> CINWeights:
        d = self.channels * self.roi_size ** 2
        r1, r1_bias = self.f_R.conv1.operator()
        o1, o1_bias = self.f_O.conv1.operator()
        z1, z1_bias = self.f_Z.conv1.operator()
        first = torch.cat([r1[:d], r1[d:], o1, z1[:d]], dim=1)
        first_bias = torch.cat([r1_bias, torch.zeros_like(r1_bias), o1_bias, z1_bias])
        return CINWeights(
            channels=self.channels,
            k=self.roi_size,
            first=first,
            first_bias=first_bias,
            r2=self.f_R.conv2.operator(),
            o2=self.f_O.conv2.operator(),
            a1=self.f_A.conv1.operator(),
            a2=self.f_A.conv2.operator(),
            z_e=z1[d:],
            z2=self.f_Z.conv2.operator(),
            p1=self.f_P.conv1.operator(),
            p2=self.f_P.conv2.operator(),
            decoder=self.decoder,
        )

    def forward(self, b_ref: torch.Tensor, horizon: int) -> torch.Tensor:
        """Rollout from pooled reference features (B, T_ref, 3, C, k, k)."""
        return rollout(b_ref.flatten(-3), self.weights(), horizon)
