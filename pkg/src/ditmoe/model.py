"""The diffusion transformer: patchify, adaLN-conditioned blocks with
dense or mixture-of-experts FFNs on interleaved layers, and the output
head.  Every block starts as the identity (modulation layers and the
final head are zero-initialized), so a fresh model predicts exactly zero.
"""

from __future__ import annotations

import numpy as np

from ditmoe import tensor as T
from ditmoe.config import TIME_EMBED_DIM, ConfigError, ModelConfig, validate_config
from ditmoe.moe import ExpertWeights, MoEConfig, Router, RoutingTrace, moe_forward, expert_forward
from ditmoe.rope import AttentionConfig, RotaryTable, attention, build_rotary_table
from ditmoe.tensor import ShapeError, Tensor, trunc_normal

__all__ = [
    "DiTMoE",
    "patchify",
    "unpatchify",
    "timestep_embedding",
]


def patchify(image: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, tokens, C*patch*patch) with row-major patch
    order; a single (C, H, W) image maps to (tokens, width)."""
    single = image.ndim == 3
    if single:
        image = T.reshape(image, (1,) + image.shape)
    if image.ndim != 4:
        raise ShapeError(f"patchify expects (B, C, H, W), got {image.shape}")
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = T.reshape(image, (b, c, gh, patch, gw, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, gh * gw, c * patch * patch))
    return T.reshape(x, x.shape[1:]) if single else x


def unpatchify(tokens: Tensor, patch: int, grid_h: int, grid_w: int) -> Tensor:
    """Inverse of patchify; channel count is inferred from token width."""
    single = tokens.ndim == 2
    if single:
        tokens = T.reshape(tokens, (1,) + tokens.shape)
    b, n, width = tokens.shape
    if n != grid_h * grid_w:
        raise ShapeError(f"{n} tokens do not fill a {grid_h}x{grid_w} grid")
    if width % (patch * patch):
        raise ShapeError(f"token width {width} not divisible by patch^2 {patch * patch}")
    c = width // (patch * patch)
    x = T.reshape(tokens, (b, grid_h, grid_w, c, patch, patch))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    x = T.reshape(x, (b, c, grid_h * patch, grid_w * patch))
    return T.reshape(x, x.shape[1:]) if single else x


def timestep_embedding(t: np.ndarray, dim: int = TIME_EMBED_DIM,
                       max_period: float = 10000.0, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of diffusion time; t in [0,1] is stretched by
    `scale` so the frequency ladder is exercised like integer steps."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * scale * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


class ConditionEmbedding:
    """Timestep MLP plus class table; the table's last row is the null
    class used when labels are dropped for classifier-free guidance."""

    def __init__(self, params: dict, num_classes: int):
        self.fc1_w = params["cond.time_fc1.weight"]
        self.fc1_b = params["cond.time_fc1.bias"]
        self.fc2_w = params["cond.time_fc2.weight"]
        self.fc2_b = params["cond.time_fc2.bias"]
        self.table = params["cond.class_table"]
        self.num_classes = num_classes

    def __call__(self, t: np.ndarray, c: np.ndarray) -> Tensor:
        emb = Tensor(timestep_embedding(t))
        hidden = T.silu(T.add(T.matmul(emb, self.fc1_w), self.fc1_b))
        t_emb = T.add(T.matmul(hidden, self.fc2_w), self.fc2_b)
        c_emb = T.index_select(self.table, c, axis=0)
        return T.add(t_emb, c_emb)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor, n_tokens: int) -> Tensor:
    """x * (1 + scale) + shift with per-item (B,1,D) modulation vectors."""
    scale = T.expand(scale, 1, n_tokens)
    shift = T.expand(shift, 1, n_tokens)
    return T.add(T.mul(x, T.add(scale, 1.0)), shift)


class DiTBlock:
    """Pre-norm attention and FFN sublayers, each wrapped by adaLN
    modulation whose gates start at zero (identity block at init)."""

    def __init__(self, index: int, config: ModelConfig, params: dict,
                 attn_cfg: AttentionConfig, rotary: RotaryTable | None):
        self.index = index
        self.config = config
        self.attn_cfg = attn_cfg
        self.rotary = rotary
        p = f"block{index}"
        self.adaln_w = params[f"{p}.adaln.weight"]
        self.adaln_b = params[f"{p}.adaln.bias"]
        self.wq = params[f"{p}.attn.q.weight"]
        self.bq = params[f"{p}.attn.q.bias"]
        self.wk = params[f"{p}.attn.k.weight"]
        self.bk = params[f"{p}.attn.k.bias"]
        self.wv = params[f"{p}.attn.v.weight"]
        self.bv = params[f"{p}.attn.v.bias"]
        self.wo = params[f"{p}.attn.o.weight"]
        self.bo = params[f"{p}.attn.o.bias"]
        self.is_moe = config.is_moe_block(index)
        if self.is_moe:
            n_shared, n_routed, n_active = config.expert_counts()
            self.moe_cfg = MoEConfig(n_shared=n_shared, n_routed=n_routed,
                                     n_active=n_active)
            self.shared = [
                ExpertWeights(params[f"{p}.moe.shared{j}.gate"],
                              params[f"{p}.moe.shared{j}.up"],
                              params[f"{p}.moe.shared{j}.down"])
                for j in range(n_shared)
            ]
            self.routed = [
                ExpertWeights(params[f"{p}.moe.routed{e}.gate"],
                              params[f"{p}.moe.routed{e}.up"],
                              params[f"{p}.moe.routed{e}.down"])
                for e in range(n_routed)
            ]
            self.router: Router | None = None  # attached by the model
        else:
            self.ffn = ExpertWeights(params[f"{p}.ffn.gate"],
                                     params[f"{p}.ffn.up"],
                                     params[f"{p}.ffn.down"])

    def __call__(self, h: Tensor, cond_act: Tensor, step: int):
        b, n, d = h.shape
        mod = T.reshape(T.add(T.matmul(cond_act, self.adaln_w), self.adaln_b),
                        (b, 6, d))
        sh_a, sc_a, g_a, sh_m, sc_m, g_m = (
            T.reshape(T.index_select(mod, [j], axis=1), (b, 1, d)) for j in range(6))

        x = _modulate(T.layernorm(h), sh_a, sc_a, n)
        heads, kv = self.attn_cfg.n_heads, self.attn_cfg.n_kv_heads
        hd = self.attn_cfg.head_dim
        q = T.reshape(T.add(T.matmul(x, self.wq), self.bq), (b, n, heads, hd))
        k = T.reshape(T.add(T.matmul(x, self.wk), self.bk), (b, n, kv, hd))
        v = T.reshape(T.add(T.matmul(x, self.wv), self.bv), (b, n, kv, hd))
        a = T.reshape(attention(q, k, v, self.attn_cfg, self.rotary), (b, n, d))
        a = T.add(T.matmul(a, self.wo), self.bo)
        h = T.add(h, T.mul(a, T.expand(g_a, 1, n)))

        x = _modulate(T.layernorm(h), sh_m, sc_m, n)
        trace = None
        if self.is_moe:
            flat = T.reshape(x, (b * n, d))
            mix, selected = moe_forward(flat, self.shared, self.routed, self.router,
                                        self.moe_cfg, residual=False)
            core = T.reshape(mix, (b, n, d))
            trace = RoutingTrace(selected=selected, layer=self.index, step=step,
                                 n_routed=self.moe_cfg.n_routed, tokens_per_item=n)
        else:
            core = expert_forward(x, self.ffn)
        h = T.add(h, T.mul(core, T.expand(g_m, 1, n)))
        return h, trace


class DiTMoE:
    """The full class-conditional velocity model."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 bias_update_rate: float = 0.01):
        problems = validate_config(config)
        if problems:
            raise ConfigError("; ".join(problems))
        self.config = config
        self._params: dict = {}
        self._build(np.random.default_rng(seed), bias_update_rate)

        self.attn_cfg = AttentionConfig(
            n_heads=config.heads, n_kv_heads=config.n_kv_heads,
            head_dim=config.head_dim, pe_mode=config.pe_mode)
        self.rotary = None
        if self.attn_cfg.uses_rope:
            self.rotary = build_rotary_table(
                config.grid_h, config.grid_w, config.head_dim,
                base=config.rope_base, mode=config.pe_mode)
        self.cond = ConditionEmbedding(self._params, config.num_classes)
        self.blocks = [DiTBlock(i, config, self._params, self.attn_cfg, self.rotary)
                       for i in range(config.blocks)]
        for block in self.blocks:
            if block.is_moe:
                block.router = self._routers[block.index]

    def _build(self, rng: np.random.Generator, bias_update_rate: float):
        cfg = self.config
        d = cfg.hidden
        patch_in = cfg.patch_size ** 2 * cfg.in_channels

        def param(name, shape, zero=False):
            data = np.zeros(shape) if zero else trunc_normal(rng, shape)
            self._params[name] = Tensor(data, requires_grad=True, name=name)

        param("patch.weight", (patch_in, d))
        param("patch.bias", (d,), zero=True)
        if cfg.pe_mode == "ape":
            param("pos_table", (cfg.n_tokens, d))
        param("cond.time_fc1.weight", (TIME_EMBED_DIM, d))
        param("cond.time_fc1.bias", (d,), zero=True)
        param("cond.time_fc2.weight", (d, d))
        param("cond.time_fc2.bias", (d,), zero=True)
        param("cond.class_table", (cfg.num_classes + 1, d))

        kv_width = cfg.n_kv_heads * cfg.head_dim
        self._routers: dict = {}
        n_shared, n_routed, _ = cfg.expert_counts()
        for i in range(cfg.blocks):
            p = f"block{i}"
            param(f"{p}.adaln.weight", (d, 6 * d), zero=True)
            param(f"{p}.adaln.bias", (6 * d,), zero=True)
            for proj, width in (("q", d), ("k", kv_width), ("v", kv_width), ("o", d)):
                param(f"{p}.attn.{proj}.weight",
                      (d, width) if proj != "o" else (d, d))
                param(f"{p}.attn.{proj}.bias", (width if proj != "o" else d,), zero=True)
            if cfg.is_moe_block(i):
                for j in range(n_shared):
                    param(f"{p}.moe.shared{j}.gate", (d, cfg.intermediate))
                    param(f"{p}.moe.shared{j}.up", (d, cfg.intermediate))
                    param(f"{p}.moe.shared{j}.down", (cfg.intermediate, d))
                for e in range(n_routed):
                    param(f"{p}.moe.routed{e}.gate", (d, cfg.intermediate))
                    param(f"{p}.moe.routed{e}.up", (d, cfg.intermediate))
                    param(f"{p}.moe.routed{e}.down", (cfg.intermediate, d))
                param(f"{p}.moe.centroids", (n_routed, d))
                self._routers[i] = Router(
                    centroids=self._params[f"{p}.moe.centroids"],
                    update_rate=bias_update_rate)
            else:
                param(f"{p}.ffn.gate", (d, cfg.dense_width))
                param(f"{p}.ffn.up", (d, cfg.dense_width))
                param(f"{p}.ffn.down", (cfg.dense_width, d))
        param("final.weight", (d, 2 * d), zero=True)
        param("final.bias", (2 * d,), zero=True)
        param("head.weight", (d, patch_in), zero=True)
        param("head.bias", (patch_in,), zero=True)

    # -- parameter access ------------------------------------------------

    def parameters(self) -> dict:
        """Trainable tensors by canonical name (router biases excluded)."""
        return dict(self._params)

    def routers(self) -> dict:
        """Block index -> Router for every MoE block."""
        return dict(self._routers)

    def state_arrays(self) -> dict:
        """Everything a checkpoint must capture: trainable parameters plus
        the non-trainable router biases."""
        out = {k: p.data for k, p in self._params.items()}
        for i, router in self._routers.items():
            out[f"block{i}.moe.router_bias"] = router.bias
        return out

    def load_state(self, arrays: dict):
        """Copy arrays in by name; the first divergent key raises."""
        mine = self.state_arrays()
        for key in sorted(set(mine) | set(arrays)):
            if key not in arrays:
                raise KeyError(f"checkpoint missing parameter {key!r}")
            if key not in mine:
                raise KeyError(f"checkpoint has unknown parameter {key!r}")
            if tuple(np.shape(arrays[key])) != mine[key].shape:
                raise KeyError(
                    f"shape mismatch for {key!r}: checkpoint "
                    f"{np.shape(arrays[key])} vs model {mine[key].shape}")
        for name, param in self._params.items():
            param.data = np.array(arrays[name], dtype=np.float64)
        for i, router in self._routers.items():
            router.bias = np.array(arrays[f"block{i}.moe.router_bias"],
                                   dtype=np.float64)

    def zero_grads(self):
        for p in self._params.values():
            p.zero_grad()

    # -- forward ----------------------------------------------------------

    def _check_inputs(self, x, t, c):
        cfg = self.config
        want = (cfg.in_channels, cfg.image_h, cfg.image_w)
        if x.shape[1:] != want:
            raise ShapeError(f"input images {x.shape} do not match config {want}")
        if t.shape != (x.shape[0],):
            raise ShapeError(f"need one timestep per image, got {t.shape}")
        if np.any((t < 0) | (t > 1)):
            raise ValueError("timesteps must lie in [0, 1]")
        if np.any((c < 0) | (c > cfg.num_classes)):
            raise ValueError(
                f"class labels must lie in [0, {cfg.num_classes}] "
                f"({cfg.num_classes} is the null class)")

    def forward(self, x, t, c, step: int = -1):
        """Predict the velocity field for a batch.

        x: (B, C, H, W) array or Tensor; t: (B,) times in [0,1] (a scalar
        broadcasts); c: (B,) labels where num_classes means "no class".
        Returns (prediction, traces) with one RoutingTrace per MoE block.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        batch = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        c = np.asarray(c, dtype=np.int64)
        self._check_inputs(x, t, c)

        cfg = self.config
        tokens = patchify(x, cfg.patch_size)
        h = T.add(T.matmul(tokens, self._params["patch.weight"]),
                  self._params["patch.bias"])
        if cfg.pe_mode == "ape":
            h = T.add(h, self._params["pos_table"])
        cond_act = T.silu(self.cond(t, c))

        traces = []
        for block in self.blocks:
            h, trace = block(h, cond_act, step)
            if trace is not None:
                traces.append(trace)

        fin = T.reshape(T.add(T.matmul(cond_act, self._params["final.weight"]),
                              self._params["final.bias"]),
                        (batch, 2, cfg.hidden))
        shift = T.reshape(T.index_select(fin, [0], axis=1), (batch, 1, cfg.hidden))
        scale = T.reshape(T.index_select(fin, [1], axis=1), (batch, 1, cfg.hidden))
        out = _modulate(T.layernorm(h), shift, scale, cfg.n_tokens)
        out = T.add(T.matmul(out, self._params["head.weight"]), self._params["head.bias"])
        pred = unpatchify(out, cfg.patch_size, cfg.grid_h, cfg.grid_w)
        return pred, traces

    def velocity(self, x, t, c, collector=None, step: int = -1) -> np.ndarray:
        """Graph-free forward for samplers; optionally collects routing
        traces annotated with the batch's classes and timesteps."""
        with T.no_grad():
            pred, traces = self.forward(x, t, c, step=step)
        if collector is not None:
            batch = pred.data.shape[0]
            t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,)).copy()
            c_arr = np.asarray(c, dtype=np.int64).copy()
            for trace in traces:
                trace.classes = c_arr
                trace.timesteps = t_arr
            collector.extend(traces)
        return pred.data
