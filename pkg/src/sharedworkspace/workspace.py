"""The shared workspace: competitive write, gated memory update, broadcast read.

Specialists (rows of R) compete to write into a small slot memory M via
attention with queries from the current memory; the updated memory is then
blended with the previous one through input/forget gates and finally
broadcast back to every specialist as a residual read.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionOutput, ProjectionSet, multihead
from .errors import ConfigError
from .optim import NumericError
from .tensor import Tensor


@dataclass
class WorkspaceState:
    """Slot memory with arbitrary leading batch dims: (..., n_m, n_l).

    For autoregressive hosts the leading dims include the position axis, one
    independent memory per position.
    """
    memory: Tensor


class SharedWorkspace:
    """Parameters and operations of one shared workspace instance."""

    def __init__(self, rng: np.random.Generator, n_s: int, n_h: int, n_m: int,
                 n_l: int | None = None, n_heads: int = 4, key_dim: int = 32,
                 value_dim: int | None = None, gate_style: str = "unit",
                 n_write_iters: int = 1, include_memory_rows: bool = False,
                 read_q_dim: int | None = None, read_out_dim: int | None = None,
                 dtype=np.float32, prefix: str = "ws"):
        if n_m < 1:
            raise ConfigError("workspace needs at least one memory slot")
        if n_m >= n_s:
            warnings.warn(
                f"n_m={n_m} >= n_s={n_s}: the workspace is no longer a bandwidth "
                "bottleneck relative to the specialists", stacklevel=2)
        if gate_style not in ("unit", "memory"):
            raise ConfigError(f"unknown gate_style {gate_style!r}")
        n_l = n_h if n_l is None else n_l
        if include_memory_rows and n_l != n_h:
            raise ConfigError("include_memory_rows requires n_l == n_h to stack [M; A]")
        value_dim = key_dim if value_dim is None else value_dim
        self.n_s, self.n_h, self.n_m, self.n_l = n_s, n_h, n_m, n_l
        self.n_heads = n_heads
        self.key_dim, self.value_dim = key_dim, value_dim
        self.gate_style = gate_style
        self.n_write_iters = n_write_iters
        self.include_memory_rows = include_memory_rows
        self.dtype = dtype

        # Readers may live in a different width than writers (e.g. narrow
        # mechanisms reading from wide slots); default is the specialist dim.
        read_q_dim = n_h if read_q_dim is None else read_q_dim
        read_out_dim = read_q_dim if read_out_dim is None else read_out_dim
        self.write_proj = ProjectionSet(rng, n_l, n_h, n_l, n_heads, key_dim, value_dim,
                                        dtype, f"{prefix}.write")
        self.read_proj = ProjectionSet(rng, read_q_dim, n_l, read_out_dim, n_heads,
                                       key_dim, value_dim, dtype, f"{prefix}.read")
        # Gating per the input/forget construction; W1 is shared across all
        # specialists (a single instance regardless of n_s).
        gate_out = n_l if gate_style == "unit" else 1
        self.w1 = T.linear_init(rng, n_h, n_l, dtype, f"{prefix}.gate.w1")
        self.w_i = T.linear_init(rng, n_l, gate_out, dtype, f"{prefix}.gate.w_i")
        self.w_f = T.linear_init(rng, n_l, gate_out, dtype, f"{prefix}.gate.w_f")
        self.b_i = T.zeros((gate_out,), dtype, requires_grad=True, name=f"{prefix}.gate.b_i")
        self.b_f = T.zeros((gate_out,), dtype, requires_grad=True, name=f"{prefix}.gate.b_f")
        self.init_memory = T.uniform_init(rng, (n_m, n_l), 0.01, dtype, f"{prefix}.init_memory")

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.write_proj.parameters())
        params.update(self.read_proj.parameters())
        for t in (self.w1, self.w_i, self.w_f, self.b_i, self.b_f, self.init_memory):
            params[t.name] = t
        return params

    # ---- operations ---------------------------------------------------------

    def reset(self, batch_shape: tuple) -> WorkspaceState:
        """Fresh state: learned initial memory broadcast over the batch dims."""
        full = batch_shape + (self.n_m, self.n_l)
        base = T.zeros(full, dtype=self.dtype)
        return WorkspaceState(memory=T.add(base, self.init_memory))

    def write_step(self, ws: WorkspaceState, specialists: Tensor,
                   topk: int | None = None, write_mask=None) -> tuple[Tensor, AttentionOutput]:
        """Candidate memory from the write competition.

        ``specialists``: (..., n_s, n_h) rows of R.  ``topk`` selects hard
        competition with k specialist writers; None is soft competition.
        ``write_mask`` optionally hides specialist columns (e.g. causal
        masking), broadcastable to (..., n_m, n_keys).
        Returns (candidate memory M_tilde, attention output for logging).
        """
        if specialists.shape[-2] == 0:
            raise ConfigError("write_step needs at least one specialist")
        if not np.isfinite(specialists.data).all():
            raise NumericError("non-finite specialist state entering workspace write")
        if topk is not None and not 1 <= topk <= specialists.shape[-2]:
            raise ConfigError(f"topk={topk} out of range for {specialists.shape[-2]} specialists")
        offset = 0
        if self.include_memory_rows:
            kv = T.concat([ws.memory, specialists], axis=-2)
            offset = self.n_m
        else:
            kv = specialists
        memory = ws.memory
        att = None
        for _ in range(self.n_write_iters):
            att = multihead(memory, kv, self.write_proj, mask=write_mask,
                            topk=topk, topk_offset=offset)
            memory = att.values
        return memory, att

    def gated_update(self, ws: WorkspaceState, candidate: Tensor,
                     specialist_inputs: Tensor) -> WorkspaceState:
        """Input/forget-gated blend of the candidate with the previous memory."""
        if candidate.shape != ws.memory.shape:
            raise ConfigError(
                f"candidate memory shape {candidate.shape} != {ws.memory.shape}")
        prev = ws.memory
        x_bar = T.tmean(T.relu(T.matmul(specialist_inputs, self.w1)), axis=-2, keepdims=True)
        return self.gated_update_from_pooled(ws, candidate, x_bar)

    def gated_update_from_pooled(self, ws: WorkspaceState, candidate: Tensor,
                                 x_bar: Tensor) -> WorkspaceState:
        """Gated blend with a caller-supplied pooled input summary.

        ``x_bar`` broadcasts against the memory (..., 1, n_l); autoregressive
        hosts pass a causal prefix mean instead of the full specialist mean.
        """
        prev = ws.memory
        k = T.add(x_bar, T.tanh(prev))
        gate_i = T.sigmoid(T.add(T.matmul(k, self.w_i), self.b_i))
        gate_f = T.sigmoid(T.add(T.matmul(k, self.w_f), self.b_f))
        new = T.add(T.mul(gate_i, T.tanh(candidate)), T.mul(gate_f, prev))
        return WorkspaceState(memory=new)

    def broadcast_step(self, ws: WorkspaceState,
                       specialists: Tensor) -> tuple[Tensor, AttentionOutput]:
        """Residual read: every specialist attends over the memory slots."""
        att = multihead(specialists, ws.memory, self.read_proj)
        return T.add(specialists, att.values), att


def write_broadcast_flops(n_s: int, n_m: int, n_h: int, n_l: int, n_heads: int,
                          key_dim: int, value_dim: int) -> dict:
    """Analytic multiply-add counts for one write + broadcast stage.

    Every term is linear in n_s; the pairwise-attention n_s**2 term has no
    counterpart here.  Counts are multiply-adds (one fused op), per batch
    element, excluding softmax exponentials.
    """
    hk = n_heads * key_dim
    hv = n_heads * value_dim
    write = {
        "proj_q": n_m * n_l * hk,
        "proj_k": n_s * n_h * hk,
        "proj_v": n_s * n_h * hv,
        "scores": n_heads * n_m * n_s * key_dim,
        "mix": n_heads * n_m * n_s * value_dim,
        "proj_out": n_m * hv * n_l,
    }
    read = {
        "proj_q": n_s * n_h * hk,
        "proj_k": n_m * n_l * hk,
        "proj_v": n_m * n_l * hv,
        "scores": n_heads * n_s * n_m * key_dim,
        "mix": n_heads * n_s * n_m * value_dim,
        "proj_out": n_s * hv * n_h,
    }
    total = sum(write.values()) + sum(read.values())
    return {"write": write, "read": read, "total": total}


def dump_attention_csv(path, stage, weights: np.ndarray, mode="w"):
    """Write attention weights as (stage, slot, specialist, weight) rows.

    ``weights``: (n_queries, n_keys) mean-over-heads map for one stage.
    """
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["stage", "slot", "specialist", "weight"])
        for i in range(weights.shape[0]):
            for j in range(weights.shape[1]):
                writer.writerow([stage, i, j, float(weights[i, j])])
