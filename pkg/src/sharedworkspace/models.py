"""Host architectures built around the shared workspace.

Seven hosts share one communication contract: at every computational stage the
specialists either talk pairwise (self-attention baselines) or through the
slot memory (write competition, gated update, broadcast):

- ``tr``        transformer, pairwise self-attention, layer params shared
- ``tr_hc``     transformer, pairwise self-attention, per-layer params
- ``tr_ssw``    transformer, soft workspace competition
- ``tr_hsw``    transformer, hard top-k workspace competition
- ``tr_2xsa``   transformer, self-attention applied twice per layer
- ``rims_sw``   recurrent specialists (GRU cells) with a shared workspace
- ``tims_sw``   mechanism-partitioned transformer with a shared workspace

Vision tasks run through ``TransformerClassifier``; the copy task through the
autoregressive ``CausalTransformerLM`` (one workspace version per position)
or ``TimsModel``.  ``build_model`` dispatches on the config.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import ProjectionSet, multihead, topk_select
from .config import ModelConfig, validate
from .errors import ConfigError
from .tensor import Tensor
from .workspace import SharedWorkspace, WorkspaceState


# ---- building blocks ---------------------------------------------------------


class Dense:
    def __init__(self, rng, fan_in, fan_out, dtype=np.float32, prefix="dense", bias=True):
        self.w = T.linear_init(rng, fan_in, fan_out, dtype, f"{prefix}.w")
        self.b = T.zeros((fan_out,), dtype, requires_grad=True, name=f"{prefix}.b") if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.w)
        return T.add(y, self.b) if self.b is not None else y

    def parameters(self):
        out = {self.w.name: self.w}
        if self.b is not None:
            out[self.b.name] = self.b
        return out


class LayerNorm:
    def __init__(self, dim, dtype=np.float32, prefix="ln"):
        # ``dim`` may be a tuple for per-mechanism norms (n_b, dm).
        self.g = T.ones(dim, dtype, requires_grad=True, name=f"{prefix}.g")
        self.b = T.zeros(dim, dtype, requires_grad=True, name=f"{prefix}.b")

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.b)

    def parameters(self):
        return {self.g.name: self.g, self.b.name: self.b}


class FeedForward:
    def __init__(self, rng, dim, hidden, dtype=np.float32, prefix="ffn"):
        self.d1 = Dense(rng, dim, hidden, dtype, f"{prefix}.1")
        self.d2 = Dense(rng, hidden, dim, dtype, f"{prefix}.2")

    def __call__(self, x):
        return self.d2(T.relu(self.d1(x)))

    def parameters(self):
        return {**self.d1.parameters(), **self.d2.parameters()}


def causal_mask(n: int) -> np.ndarray:
    """(n, n) lower-triangular keep mask: row t keeps keys at positions <= t."""
    return np.tril(np.ones((n, n), dtype=np.float32))


def prefix_mean_matrix(n: int, dtype=np.float32) -> np.ndarray:
    """(n, n) matrix L with L @ x giving causal running means of the rows of x."""
    m = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
    return m.astype(dtype)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patches in row-major order, pixels flattened per patch.

    ``images``: (B, H, W) or (B, H, W, C) -> (B, n_patches, patch*patch*C).
    """
    if images.ndim == 3:
        images = images[..., None]
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"patch size {patch} does not divide image {h}x{w}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def count_parameters(model) -> int:
    return int(sum(p.size for p in model.parameters().values()))


def _mean_over_heads(weights: Tensor) -> np.ndarray:
    w = weights.data
    # (..., H, n_q, n_k) -> first batch element, mean over heads.
    while w.ndim > 3:
        w = w[0]
    return w.mean(axis=0)


# ---- transformer classifier (vision tasks) -----------------------------------


class TransformerClassifier:
    """Patch transformer with a CLS readout; communication step per host."""

    QUESTION_BITS = 11

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        validate(cfg)
        if cfg.host not in ("tr", "tr_hc", "tr_ssw", "tr_hsw", "tr_2xsa"):
            raise ConfigError(f"host {cfg.host!r} is not a transformer classifier")
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        n_h = cfg.n_h
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.n_channels
        self.max_tokens = 1 + cfg.n_patches + (1 if cfg.task == "soc" else 0)

        self.embed = Dense(rng, patch_dim, n_h, dtype, "embed")
        self.pos = T.uniform_init(rng, (self.max_tokens, n_h), 0.02, dtype, "pos")
        self.cls = T.uniform_init(rng, (1, n_h), 0.02, dtype, "cls")
        self.q_embed = Dense(rng, self.QUESTION_BITS, n_h, dtype, "question") \
            if cfg.task == "soc" else None

        n_unique = 1 if cfg.resolved_share_layers() else cfg.n_layers
        self.blocks = []
        for i in range(n_unique):
            p = f"layer{i}"
            blk = {
                "ln1": LayerNorm(n_h, dtype, f"{p}.ln1"),
                "ln2": LayerNorm(n_h, dtype, f"{p}.ln2"),
                "ffn": FeedForward(rng, n_h, cfg.ffn_dim, dtype, f"{p}.ffn"),
            }
            if cfg.host in ("tr", "tr_hc", "tr_2xsa") or cfg.sw_plus_sa:
                blk["sa"] = ProjectionSet(rng, n_h, n_h, n_h, cfg.n_heads,
                                          cfg.key_dim, cfg.value_dim, dtype, f"{p}.sa")
            if cfg.host == "tr_2xsa" or (cfg.sw_plus_sa and cfg.host in ("tr_ssw", "tr_hsw")):
                blk["ln1b"] = LayerNorm(n_h, dtype, f"{p}.ln1b")
            if cfg.host == "tr_2xsa":
                blk["sa2"] = ProjectionSet(rng, n_h, n_h, n_h, cfg.n_heads,
                                           cfg.key_dim, cfg.value_dim, dtype, f"{p}.sa2")
            self.blocks.append(blk)

        self.workspace = None
        if cfg.host in ("tr_ssw", "tr_hsw"):
            self.workspace = SharedWorkspace(
                rng, n_s=self.max_tokens, n_h=n_h, n_m=cfg.n_m, n_l=cfg.n_l,
                n_heads=cfg.mem_heads, key_dim=cfg.key_dim, value_dim=cfg.value_dim,
                gate_style=cfg.gate_style, n_write_iters=cfg.n_write_iters,
                dtype=dtype, prefix="ws")

        self.final_ln = LayerNorm(n_h, dtype, "final_ln")
        self.head = Dense(rng, n_h, cfg.n_classes, dtype, "head")
        self.last_attention = []   # per-stage write/read maps from the last forward

    def parameters(self):
        params = {}
        params.update(self.embed.parameters())
        params[self.pos.name] = self.pos
        params[self.cls.name] = self.cls
        if self.q_embed is not None:
            params.update(self.q_embed.parameters())
        for blk in self.blocks:
            for part in blk.values():
                params.update(part.parameters())
        if self.workspace is not None:
            params.update(self.workspace.parameters())
        params.update(self.final_ln.parameters())
        params.update(self.head.parameters())
        return params

    def forward(self, images: np.ndarray, question: np.ndarray | None = None,
                rng=None) -> Tensor:
        """Logits (B, n_classes).  ``rng`` enables dropout (training mode)."""
        cfg = self.cfg
        patches = patchify(np.asarray(images, dtype=self.dtype), cfg.patch_size)
        b, n_p, _ = patches.shape
        cls = T.add(T.zeros((b, 1, cfg.n_h), self.dtype), self.cls)
        parts = [cls, self.embed(Tensor(patches))]
        if self.q_embed is not None:
            if question is None:
                raise ConfigError("this task binding requires a question vector")
            q = self.q_embed(Tensor(np.asarray(question, dtype=self.dtype)))
            parts.append(T.reshape(q, (b, 1, cfg.n_h)))
        h = T.concat(parts, axis=-2)
        n_t = h.shape[-2]
        if n_t > self.max_tokens:
            raise ConfigError(f"sequence of {n_t} tokens exceeds maximum {self.max_tokens}")
        h = T.add(h, self.pos[:n_t])

        topk = cfg.topk if cfg.host == "tr_hsw" else None
        if topk is not None and topk > n_t:
            raise ConfigError(f"topk={topk} exceeds {n_t} specialists")
        state = self.workspace.reset((b,)) if self.workspace is not None else None
        self.last_attention = []
        drop = lambda x: T.dropout(x, cfg.dropout, rng)

        for layer in range(cfg.n_layers):
            blk = self.blocks[layer % len(self.blocks)]
            xn = blk["ln1"](h)
            if cfg.host in ("tr", "tr_hc"):
                h = T.add(h, drop(multihead(xn, xn, blk["sa"]).values))
            elif cfg.host == "tr_2xsa":
                h = T.add(h, drop(multihead(xn, xn, blk["sa"]).values))
                xn2 = blk["ln1b"](h)
                h = T.add(h, drop(multihead(xn2, xn2, blk["sa2"]).values))
            else:
                if not cfg.persistent_memory:
                    state = self.workspace.reset((b,))
                if cfg.sw_plus_sa:
                    h = T.add(h, drop(multihead(xn, xn, blk["sa"]).values))
                    xn = blk["ln1b"](h)
                cand, w_att = self.workspace.write_step(state, xn, topk=topk)
                state = self.workspace.gated_update(state, cand, xn)
                r_att = multihead(xn, state.memory, self.workspace.read_proj)
                h = T.add(h, drop(r_att.values))
                self.last_attention.append({
                    "stage": layer,
                    "write": _mean_over_heads(w_att.weights),
                    "read": _mean_over_heads(r_att.weights),
                })
            h = T.add(h, drop(blk["ffn"](blk["ln2"](h))))

        pooled = self.final_ln(h)[:, 0]
        return self.head(pooled)


# ---- autoregressive transformer (copy task) ----------------------------------


class CausalTransformerLM:
    """Next-token transformer; workspace hosts keep one memory per position.

    Position t's memory only accumulates writes from positions <= t, and the
    broadcast at t reads t's own memory, so future tokens cannot influence
    past logits.
    """

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        validate(cfg)
        if cfg.host not in ("tr", "tr_hc", "tr_ssw", "tr_hsw", "tr_2xsa"):
            raise ConfigError(f"host {cfg.host!r} is not a causal transformer")
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        n_h = cfg.n_h
        self.max_tokens = cfg.seq_len

        self.embed = T.uniform_init(rng, (cfg.vocab_size, n_h), 0.02, dtype, "embed")
        self.pos = T.uniform_init(rng, (self.max_tokens, n_h), 0.02, dtype, "pos")

        n_unique = 1 if cfg.resolved_share_layers() else cfg.n_layers
        self.blocks = []
        for i in range(n_unique):
            p = f"layer{i}"
            blk = {
                "ln1": LayerNorm(n_h, dtype, f"{p}.ln1"),
                "ln2": LayerNorm(n_h, dtype, f"{p}.ln2"),
                "ffn": FeedForward(rng, n_h, cfg.ffn_dim, dtype, f"{p}.ffn"),
            }
            if cfg.host in ("tr", "tr_hc", "tr_2xsa") or cfg.sw_plus_sa:
                blk["sa"] = ProjectionSet(rng, n_h, n_h, n_h, cfg.n_heads,
                                          cfg.key_dim, cfg.value_dim, dtype, f"{p}.sa")
            if cfg.host == "tr_2xsa" or (cfg.sw_plus_sa and cfg.host in ("tr_ssw", "tr_hsw")):
                blk["ln1b"] = LayerNorm(n_h, dtype, f"{p}.ln1b")
            if cfg.host == "tr_2xsa":
                blk["sa2"] = ProjectionSet(rng, n_h, n_h, n_h, cfg.n_heads,
                                           cfg.key_dim, cfg.value_dim, dtype, f"{p}.sa2")
            self.blocks.append(blk)

        self.workspace = None
        if cfg.host in ("tr_ssw", "tr_hsw"):
            self.workspace = SharedWorkspace(
                rng, n_s=self.max_tokens, n_h=n_h, n_m=cfg.n_m, n_l=cfg.n_l,
                n_heads=cfg.mem_heads, key_dim=cfg.key_dim, value_dim=cfg.value_dim,
                gate_style=cfg.gate_style, n_write_iters=cfg.n_write_iters,
                dtype=dtype, prefix="ws")

        self.final_ln = LayerNorm(n_h, dtype, "final_ln")
        self.head = Dense(rng, n_h, cfg.vocab_size, dtype, "head")

    def parameters(self):
        params = {self.embed.name: self.embed, self.pos.name: self.pos}
        for blk in self.blocks:
            for part in blk.values():
                params.update(part.parameters())
        if self.workspace is not None:
            params.update(self.workspace.parameters())
        params.update(self.final_ln.parameters())
        params.update(self.head.parameters())
        return params

    def forward(self, tokens: np.ndarray, rng=None) -> Tensor:
        """Next-token logits (B, T, vocab) for integer ``tokens`` (B, T)."""
        cfg = self.cfg
        tokens = np.asarray(tokens)
        b, n_t = tokens.shape
        if n_t > self.max_tokens:
            raise ConfigError(f"sequence of {n_t} tokens exceeds maximum {self.max_tokens}")
        h = T.add(self.embed[tokens], self.pos[:n_t])
        sa_mask = causal_mask(n_t)
        # Write-competition mask: query position t (axis -4), one head axis,
        # memory-slot axis, then the key positions.
        write_mask = sa_mask.reshape(n_t, 1, 1, n_t)
        prefix_mean = Tensor(prefix_mean_matrix(n_t, self.dtype))

        topk = cfg.topk if cfg.host == "tr_hsw" else None
        state = self.workspace.reset((b, n_t)) if self.workspace is not None else None
        drop = lambda x: T.dropout(x, cfg.dropout, rng)

        for layer in range(cfg.n_layers):
            blk = self.blocks[layer % len(self.blocks)]
            xn = blk["ln1"](h)
            if cfg.host in ("tr", "tr_hc"):
                h = T.add(h, drop(multihead(xn, xn, blk["sa"], mask=sa_mask).values))
            elif cfg.host == "tr_2xsa":
                h = T.add(h, drop(multihead(xn, xn, blk["sa"], mask=sa_mask).values))
                xn2 = blk["ln1b"](h)
                h = T.add(h, drop(multihead(xn2, xn2, blk["sa2"], mask=sa_mask).values))
            else:
                if not cfg.persistent_memory:
                    state = self.workspace.reset((b, n_t))
                if cfg.sw_plus_sa:
                    h = T.add(h, drop(multihead(xn, xn, blk["sa"], mask=sa_mask).values))
                    xn = blk["ln1b"](h)
                # Every position's workspace sees all positions as candidate
                # writers, causally masked.
                writers = T.reshape(xn, (b, 1, n_t, cfg.n_h))
                cand, _ = self.workspace.write_step(state, writers, topk=topk,
                                                    write_mask=write_mask)
                pooled = T.matmul(prefix_mean, T.relu(T.matmul(xn, self.workspace.w1)))
                pooled = T.reshape(pooled, (b, n_t, 1, self.workspace.n_l))
                state = self.workspace.gated_update_from_pooled(state, cand, pooled)
                readers = T.reshape(xn, (b, n_t, 1, cfg.n_h))
                read = multihead(readers, state.memory, self.workspace.read_proj)
                h = T.add(h, drop(T.reshape(read.values, (b, n_t, cfg.n_h))))
            h = T.add(h, drop(blk["ffn"](blk["ln2"](h))))

        return self.head(self.final_ln(h))


# ---- recurrent specialists (RIMs host) ---------------------------------------


class RimsCell:
    """Per-specialist GRU cells plus the null-augmented input attention."""

    def __init__(self, rng, n_s, n_h, in_dim, n_sel, key_dim=16,
                 dtype=np.float32, prefix="rims"):
        if n_sel > n_s:
            raise ConfigError(f"n_sel={n_sel} exceeds n_s={n_s}")
        self.n_s, self.n_h, self.in_dim, self.n_sel = n_s, n_h, in_dim, n_sel
        self.key_dim = key_dim
        self.dtype = dtype
        s = 1.0 / np.sqrt(n_h)
        g = lambda shape, name: T.uniform_init(rng, shape, s, dtype, f"{prefix}.{name}")
        # Stacked per-specialist GRU weights: (n_s, in, n_h) / (n_s, n_h, n_h).
        si = 1.0 / np.sqrt(n_h)
        self.w_z = T.uniform_init(rng, (n_s, n_h, n_h), si, dtype, f"{prefix}.gru.w_z")
        self.w_r = T.uniform_init(rng, (n_s, n_h, n_h), si, dtype, f"{prefix}.gru.w_r")
        self.w_n = T.uniform_init(rng, (n_s, n_h, n_h), si, dtype, f"{prefix}.gru.w_n")
        self.u_z = g((n_s, n_h, n_h), "gru.u_z")
        self.u_r = g((n_s, n_h, n_h), "gru.u_r")
        self.u_n = g((n_s, n_h, n_h), "gru.u_n")
        self.b_z = T.zeros((n_s, n_h), dtype, requires_grad=True, name=f"{prefix}.gru.b_z")
        self.b_r = T.zeros((n_s, n_h), dtype, requires_grad=True, name=f"{prefix}.gru.b_r")
        self.b_n = T.zeros((n_s, n_h), dtype, requires_grad=True, name=f"{prefix}.gru.b_n")
        # Input attention: per-specialist queries, shared keys/values over
        # [z_t; null].  Values are specialist-state sized.
        self.w_q = T.uniform_init(rng, (n_s, n_h, key_dim), si, dtype, f"{prefix}.inp.w_q")
        self.w_e = T.linear_init(rng, in_dim, key_dim, dtype, f"{prefix}.inp.w_e")
        self.w_v = T.linear_init(rng, in_dim, n_h, dtype, f"{prefix}.inp.w_v")
        self.null_row = T.uniform_init(rng, (1, in_dim), 0.02, dtype, f"{prefix}.inp.null")

    def parameters(self):
        return {t.name: t for t in (
            self.w_z, self.w_r, self.w_n, self.u_z, self.u_r, self.u_n,
            self.b_z, self.b_r, self.b_n, self.w_q, self.w_e, self.w_v, self.null_row)}

    def _per_specialist_matmul(self, x: Tensor, w: Tensor) -> Tensor:
        # x (B, n_s, d) with stacked weights w (n_s, d, e) -> (B, n_s, e)
        b = x.shape[0]
        y = T.matmul(T.reshape(x, (b, self.n_s, 1, x.shape[-1])), w)
        return T.reshape(y, (b, self.n_s, w.shape[-1]))

    def input_attention(self, z: Tensor, h_prev: Tensor):
        """Attend over [z; null] with per-specialist queries.

        Returns (attended input a (B, n_s, n_h), weights (B, n_s, rows),
        null weight (B, n_s)); the null row is the last key row.
        """
        b = z.shape[0]
        zn = T.concat([z, T.add(T.zeros((b, 1, self.in_dim), self.dtype), self.null_row)],
                      axis=-2)
        q = self._per_specialist_matmul(h_prev, self.w_q)
        keys = T.matmul(zn, self.w_e)
        vals = T.matmul(zn, self.w_v)
        scores = T.mul(T.matmul(q, T.swapaxes(keys, -1, -2)), 1.0 / np.sqrt(self.key_dim))
        s = T.softmax(scores, axis=-1)
        a = T.matmul(s, vals)
        return a, s, s.data[..., -1]

    def gru(self, x: Tensor, h: Tensor) -> Tensor:
        pm = self._per_specialist_matmul
        z = T.sigmoid(T.add(T.add(pm(x, self.w_z), pm(h, self.u_z)), self.b_z))
        r = T.sigmoid(T.add(T.add(pm(x, self.w_r), pm(h, self.u_r)), self.b_r))
        n = T.tanh(T.add(T.add(pm(x, self.w_n), T.mul(r, pm(h, self.u_n))), self.b_n))
        return T.add(T.mul(T.add(T.mul(z, -1.0), 1.0), n), T.mul(z, h))


def rims_sw_step(cell: RimsCell, ws: SharedWorkspace, state: WorkspaceState,
                 z_t: Tensor, h_prev: Tensor, broadcast: bool = True):
    """One recurrent step: input competition, selective GRU update, workspace
    write from the activated specialists, gated update, broadcast to all.

    Returns (h_next, new workspace state, selection result).
    Non-selected specialists keep their previous state bitwise, modified only
    by the broadcast residual (omit with ``broadcast=False``).
    """
    b = z_t.shape[0]
    a, _, null_w = cell.input_attention(z_t, h_prev)
    sel = topk_select(1.0 - null_w, cell.n_sel)
    active = Tensor(sel.keep_mask[..., None].astype(cell.dtype))

    gru_out = cell.gru(a, h_prev)
    h_bar = T.add(T.mul(gru_out, active), T.mul(h_prev, T.add(T.mul(active, -1.0), 1.0)))

    rows = T.take(a, (np.arange(b)[:, None], sel.indices))   # (B, n_sel, n_h)
    cand, _ = ws.write_step(state, rows)
    state = ws.gated_update(state, cand, rows)
    if broadcast:
        h_next, _ = ws.broadcast_step(state, h_bar)
    else:
        h_next = h_bar
    return h_next, state, sel


class RimsModel:
    """Sequence classifier: an input projection feeding recurrent specialists
    that communicate through the shared workspace at every time step."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32, in_dim=None):
        validate(cfg)
        if cfg.host != "rims_sw":
            raise ConfigError(f"host {cfg.host!r} is not a recurrent-specialist model")
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        in_dim = cfg.n_h if in_dim is None else in_dim
        self.encoder = Dense(rng, in_dim, cfg.n_h, dtype, "encoder")
        self.cell = RimsCell(rng, cfg.n_s, cfg.n_h, cfg.n_h, cfg.n_sel,
                             key_dim=cfg.key_dim, dtype=dtype)
        self.workspace = SharedWorkspace(
            rng, n_s=cfg.n_s, n_h=cfg.n_h, n_m=cfg.n_m, n_l=cfg.n_h,
            n_heads=cfg.mem_heads, key_dim=cfg.key_dim, value_dim=cfg.value_dim,
            gate_style=cfg.gate_style, include_memory_rows=True,
            dtype=dtype, prefix="ws")
        self.h0 = T.uniform_init(rng, (cfg.n_s, cfg.n_h), 0.02, dtype, "h0")
        self.head = Dense(rng, cfg.n_s * cfg.n_h, cfg.n_classes, dtype, "head")

    def parameters(self):
        params = {self.h0.name: self.h0}
        params.update(self.encoder.parameters())
        params.update(self.cell.parameters())
        params.update(self.workspace.parameters())
        params.update(self.head.parameters())
        return params

    def forward(self, x_seq: np.ndarray, rng=None) -> Tensor:
        """Logits (B, n_classes) from input frames (B, steps, rows, in_dim)."""
        x = np.asarray(x_seq, dtype=self.dtype)
        b, steps = x.shape[0], x.shape[1]
        h = T.add(T.zeros((b, self.cfg.n_s, self.cfg.n_h), self.dtype), self.h0)
        state = self.workspace.reset((b,))
        for t in range(steps):
            z = self.encoder(Tensor(x[:, t]))
            h, state, _ = rims_sw_step(self.cell, self.workspace, state, z, h)
        flat = T.reshape(h, (b, self.cfg.n_s * self.cfg.n_h))
        return self.head(T.dropout(flat, self.cfg.dropout, rng))


# ---- mechanism-partitioned transformer (TIMs host) ---------------------------


class TimsLayer:
    """One modular layer: mechanisms compete per position, the winners
    self-attend (scaled by their retained competition score) and write one
    combined row per position into that position's workspace."""

    def __init__(self, rng, n_b, dm, n_sel, n_l, ffn_dim, n_heads=2,
                 key_dim=8, value_dim=8, dtype=np.float32, prefix="tims"):
        if n_sel > n_b:
            raise ConfigError(f"n_sel={n_sel} exceeds n_b={n_b}")
        self.n_b, self.dm, self.n_sel, self.n_l = n_b, dm, n_sel, n_l
        self.dtype = dtype
        si = 1.0 / np.sqrt(dm)
        self.w_c = T.uniform_init(rng, (n_b, dm), si, dtype, f"{prefix}.w_c")
        self.sa = [ProjectionSet(rng, dm, dm, dm, n_heads, key_dim, value_dim,
                                 dtype, f"{prefix}.mech{k}.sa") for k in range(n_b)]
        self.ln1 = LayerNorm((n_b, dm), dtype, f"{prefix}.ln1")
        self.ln2 = LayerNorm((n_b, dm), dtype, f"{prefix}.ln2")
        self.w_a = T.linear_init(rng, n_b * dm, n_l, dtype, f"{prefix}.w_a")
        self.ffn_w1 = T.uniform_init(rng, (n_b, dm, ffn_dim), si, dtype, f"{prefix}.ffn.w1")
        self.ffn_w2 = T.uniform_init(rng, (n_b, ffn_dim, dm),
                                     1.0 / np.sqrt(ffn_dim), dtype, f"{prefix}.ffn.w2")

    def parameters(self):
        params = {t.name: t for t in (self.w_c, self.w_a, self.ffn_w1, self.ffn_w2)}
        for p in self.sa:
            params.update(p.parameters())
        params.update(self.ln1.parameters())
        params.update(self.ln2.parameters())
        return params


def tims_sw_layer(layer: TimsLayer, ws: SharedWorkspace, state: WorkspaceState,
                  h: Tensor, causal: bool = True, rng=None, dropout: float = 0.0):
    """One modular layer pass: (B, T, D) -> (B, T, D) plus new workspace state.

    The position axis carries one workspace memory per position
    (state.memory: (B, T, n_m, n_l)).
    """
    b, n_t, d = h.shape
    n_b, dm = layer.n_b, layer.dm
    hm = T.reshape(h, (b, n_t, n_b, dm))

    # Step 1: competition. c holds the per-position soft scores over
    # mechanisms; non-selected scores are zeroed but not renormalized.
    scores = T.tsum(T.mul(hm, layer.w_c), axis=-1)      # (B, T, n_b)
    sel = topk_select(scores.data, layer.n_sel)
    c_star = T.masked_softmax_retain(scores, sel.keep_mask, axis=-1)

    # Step 2: selected mechanisms self-attend over positions, residual.
    mask = causal_mask(n_t) if causal else None
    xn = layer.ln1(hm)
    att_cols = []
    for k in range(n_b):
        col = multihead(xn[:, :, k], xn[:, :, k], layer.sa[k], mask=mask).values
        att_cols.append(T.reshape(col, (b, n_t, 1, dm)))
    att = T.concat(att_cols, axis=-2)                    # (B, T, n_b, dm)
    scale = T.reshape(c_star, (b, n_t, n_b, 1))
    h_bar = T.add(hm, T.dropout(T.mul(scale, att), dropout, rng))

    # Step 3: write.  Each position contributes one combined row built from
    # the score-scaled mechanism states; positions fold into the batch.
    a = T.reshape(T.mul(scale, h_bar), (b, n_t, n_b * dm))
    rows = T.reshape(T.matmul(a, layer.w_a), (b, n_t, 1, layer.n_l))
    cand, _ = ws.write_step(state, rows)
    state = ws.gated_update(state, cand, rows)

    # Step 4: broadcast, one read per mechanism from its position's memory.
    read = multihead(h_bar, state.memory, ws.read_proj)  # (B, T, n_b, dm)
    h_out = T.add(h_bar, T.dropout(read.values, dropout, rng))

    # Per-mechanism feed-forward, pre-norm residual.
    y = layer.ln2(h_out)
    y = T.matmul(T.relu(T.matmul(T.reshape(y, (b, n_t, n_b, 1, dm)), layer.ffn_w1)),
                 layer.ffn_w2)
    h_out = T.add(h_out, T.dropout(T.reshape(y, (b, n_t, n_b, dm)), dropout, rng))
    return T.reshape(h_out, (b, n_t, d)), state, sel


class TimsModel:
    """Autoregressive LM: monolithic layers sandwiching a modular stack whose
    mechanisms communicate through a per-position shared workspace."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        validate(cfg)
        if cfg.host != "tims_sw":
            raise ConfigError(f"host {cfg.host!r} is not a mechanism-partitioned model")
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        d, n_b = cfg.n_h, cfg.n_s
        dm = d // n_b
        self.max_tokens = cfg.seq_len
        self.embed = T.uniform_init(rng, (cfg.vocab_size, d), 0.02, dtype, "embed")
        self.pos = T.uniform_init(rng, (self.max_tokens, d), 0.02, dtype, "pos")

        def mono_block(prefix):
            return {
                "ln1": LayerNorm(d, dtype, f"{prefix}.ln1"),
                "ln2": LayerNorm(d, dtype, f"{prefix}.ln2"),
                "sa": ProjectionSet(rng, d, d, d, cfg.n_heads, cfg.key_dim,
                                    cfg.value_dim, dtype, f"{prefix}.sa"),
                "ffn": FeedForward(rng, d, cfg.ffn_dim, dtype, f"{prefix}.ffn"),
            }

        self.mono_in = mono_block("mono_in")      # shared across the leading layers
        self.mono_out = mono_block("mono_out")    # shared across the trailing layers
        self.modular = TimsLayer(rng, n_b, dm, cfg.n_sel, cfg.slot_dim,
                                 max(cfg.ffn_dim // n_b, 4), n_heads=cfg.n_heads,
                                 key_dim=cfg.key_dim, value_dim=cfg.value_dim,
                                 dtype=dtype, prefix="modular")
        self.workspace = SharedWorkspace(
            rng, n_s=n_b, n_h=cfg.slot_dim, n_m=cfg.n_m, n_l=cfg.slot_dim,
            n_heads=cfg.mem_heads, key_dim=cfg.key_dim, value_dim=cfg.value_dim,
            gate_style=cfg.gate_style, read_q_dim=dm, read_out_dim=dm,
            dtype=dtype, prefix="ws")
        self.final_ln = LayerNorm(d, dtype, "final_ln")
        self.head = Dense(rng, d, cfg.vocab_size, dtype, "head")

    def parameters(self):
        params = {self.embed.name: self.embed, self.pos.name: self.pos}
        for blk in (self.mono_in, self.mono_out):
            for part in blk.values():
                params.update(part.parameters())
        params.update(self.modular.parameters())
        params.update(self.workspace.parameters())
        params.update(self.final_ln.parameters())
        params.update(self.head.parameters())
        return params

    def _mono(self, blk, h, mask, drop):
        xn = blk["ln1"](h)
        h = T.add(h, drop(multihead(xn, xn, blk["sa"], mask=mask).values))
        return T.add(h, drop(blk["ffn"](blk["ln2"](h))))

    def forward(self, tokens: np.ndarray, rng=None) -> Tensor:
        cfg = self.cfg
        tokens = np.asarray(tokens)
        b, n_t = tokens.shape
        if n_t > self.max_tokens:
            raise ConfigError(f"sequence of {n_t} tokens exceeds maximum {self.max_tokens}")
        h = T.add(self.embed[tokens], self.pos[:n_t])
        mask = causal_mask(n_t)
        drop = lambda x: T.dropout(x, cfg.dropout, rng)

        for _ in range(cfg.tims_mono_layers):
            h = self._mono(self.mono_in, h, mask, drop)
        state = self.workspace.reset((b, n_t))
        self.last_selection = []
        for _ in range(cfg.n_layers):
            h, state, sel = tims_sw_layer(self.modular, self.workspace, state, h,
                                          causal=True, rng=rng, dropout=cfg.dropout)
            self.last_selection.append(sel.indices)
        for _ in range(cfg.tims_mono_layers):
            h = self._mono(self.mono_out, h, mask, drop)
        return self.head(self.final_ln(h))


# ---- dispatch ----------------------------------------------------------------


def build_model(cfg: ModelConfig, rng=None, dtype=np.float32):
    validate(cfg)
    if cfg.host == "rims_sw":
        in_dim = None
        if cfg.task in ("triangles", "soc"):
            in_dim = cfg.patch_size * cfg.patch_size * cfg.n_channels
        return RimsModel(cfg, rng, dtype, in_dim=in_dim)
    if cfg.host == "tims_sw":
        return TimsModel(cfg, rng, dtype)
    if cfg.task == "copy":
        return CausalTransformerLM(cfg, rng, dtype)
    return TransformerClassifier(cfg, rng, dtype)
