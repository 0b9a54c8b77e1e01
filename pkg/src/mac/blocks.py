"""Mamba-2 style blocks, LoRA adapters, and the stacked language model.

Block dataflow (residual added by the caller / the stack):

    in_proj -> [gate z | conv channels | step-size raw]
    conv channels -> depthwise causal conv -> silu -> [head inputs | B | C]
    selective scan (any mode) + per-head skip
    y * silu(z) -> RMS norm -> out_proj

The base projection weights stay frozen during fine-tuning; low-rank
adapters on in_proj and out_proj carry the trainable update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ssd
from . import tensor as tz
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class LmConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    head_dim: int = 16
    d_state: int = 16
    n_groups: int = 1
    vocab_size: int = 512
    tie_embeddings: bool = True
    conv_width: int = 4

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ShapeError(
                f"d_model {self.d_model} must equal n_heads*head_dim "
                f"{self.n_heads}*{self.head_dim}"
            )
        if self.n_heads % self.n_groups != 0:
            raise ShapeError(f"n_heads {self.n_heads} not divisible by n_groups {self.n_groups}")

    @property
    def d_inner(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def conv_dim(self) -> int:
        return self.d_inner + 2 * self.n_groups * self.d_state

    @property
    def d_in_proj(self) -> int:
        return 2 * self.d_inner + 2 * self.n_groups * self.d_state + self.n_heads


def nano_config(vocab_size: int = 512, **over) -> LmConfig:
    return LmConfig(n_layers=4, d_model=64, n_heads=4, head_dim=16, d_state=16,
                    vocab_size=vocab_size, **over)


def small_config(vocab_size: int = 512, **over) -> LmConfig:
    return LmConfig(n_layers=8, d_model=128, n_heads=8, head_dim=16, d_state=16,
                    vocab_size=vocab_size, **over)


@dataclass
class LoraAdapter:
    """Low-rank update (alpha/rank) * down @ up with alpha fixed at 2*rank."""

    rank: int
    down: Tensor
    up: Tensor
    alpha: float = 0.0

    def __post_init__(self):
        if self.rank <= 0:
            raise ContractError(f"LoRA rank must be positive, got {self.rank}")
        if self.alpha == 0.0:
            self.alpha = 2.0 * self.rank

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @staticmethod
    def init(d_in: int, d_out: int, rank: int, rng: np.random.Generator) -> "LoraAdapter":
        # down gets a small random start, up starts at zero so the adapted
        # projection is exactly the base projection at initialization
        down = Tensor(rng.standard_normal((d_in, rank)) / np.sqrt(d_in))
        up = tz.zeros((rank, d_out))
        return LoraAdapter(rank=rank, down=down, up=up)


def lora_apply(base: Tensor, adapter: LoraAdapter | None, x: Tensor) -> Tensor:
    """x @ base plus the scaled low-rank update; base receives no gradient."""
    y = tz.matmul(x, base)
    if adapter is None:
        return y
    if adapter.rank <= 0:
        raise ContractError("LoRA rank must be positive")
    delta = tz.matmul(tz.matmul(x, adapter.down), adapter.up)
    return tz.add(y, tz.mul(delta, adapter.scale))


def lora_merge(base: Tensor, adapter: LoraAdapter) -> Tensor:
    """Fold an adapter into a plain weight matrix: base + scale * down @ up."""
    if base.shape[0] != adapter.down.shape[0] or base.shape[1] != adapter.up.shape[1]:
        raise ShapeError(
            f"merge extents disagree: base {base.shape}, "
            f"down {adapter.down.shape}, up {adapter.up.shape}"
        )
    with tz.no_grad():
        merged = tz.add(base, tz.mul(tz.matmul(adapter.down, adapter.up), adapter.scale))
    return Tensor(merged.data.copy())


class LoraLinear:
    """Frozen base matrix with an optional trainable low-rank adapter."""

    def __init__(self, base: Tensor, adapter: LoraAdapter | None = None):
        self.base = base
        self.adapter = adapter

    def __call__(self, x: Tensor) -> Tensor:
        return lora_apply(self.base, self.adapter, x)

    def parameters(self) -> dict[str, Tensor]:
        out = {"base": self.base}
        if self.adapter is not None:
            out["lora.down"] = self.adapter.down
            out["lora.up"] = self.adapter.up
        return out


@dataclass
class BlockState:
    """Streaming state of one block: scan state + conv tail (last K-1 inputs)."""

    ssm: ssd.ScanState
    conv_tail: Tensor


class MambaBlock:
    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        d, k = cfg.d_model, cfg.conv_width
        self.cfg = cfg
        self.res_norm = tz.ones((d,))
        self.in_proj = LoraLinear(Tensor(rng.standard_normal((d, cfg.d_in_proj)) / np.sqrt(d)))
        self.conv_w = Tensor(rng.uniform(-1.0, 1.0, (k, cfg.conv_dim)) / np.sqrt(k))
        self.conv_b = tz.zeros((cfg.conv_dim,))
        # step sizes start log-uniform in [1e-3, 1e-1] (inverse softplus)
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), cfg.n_heads))
        self.dt_bias = Tensor(np.log(np.expm1(dt0)))
        self.log_a = Tensor(np.log(rng.uniform(1.0, 16.0, cfg.n_heads)))
        self.skip = tz.ones((cfg.n_heads,))
        self.gate_norm = tz.ones((cfg.d_inner,))
        self.out_proj = LoraLinear(
            Tensor(
                rng.standard_normal((cfg.d_inner, d))
                / np.sqrt(cfg.d_inner)
                / np.sqrt(2.0 * cfg.n_layers)
            )
        )

    def parameters(self) -> dict[str, Tensor]:
        out = {
            "res_norm": self.res_norm,
            "conv.weight": self.conv_w,
            "conv.bias": self.conv_b,
            "dt_bias": self.dt_bias,
            "log_a": self.log_a,
            "skip": self.skip,
            "gate_norm": self.gate_norm,
        }
        for k, v in self.in_proj.parameters().items():
            out[f"in_proj.{k}"] = v
        for k, v in self.out_proj.parameters().items():
            out[f"out_proj.{k}"] = v
        return out

    def initial_state(self, batch: int, dtype=None) -> BlockState:
        cfg = self.cfg
        return BlockState(
            ssm=ssd.ScanState.zeros(cfg.n_heads, cfg.head_dim, cfg.d_state,
                                    batch=batch, dtype=dtype),
            conv_tail=tz.zeros((batch, cfg.conv_width - 1, cfg.conv_dim), dtype=dtype),
        )

    def forward(
        self,
        x: Tensor,
        mode: str = "chunked",
        chunk_len: int = ssd.DEFAULT_CHUNK,
        state: BlockState | None = None,
        return_state: bool = False,
        collect_states: bool = False,
    ):
        """x: [B, T, D] -> [B, T, D] (residual added by the caller)."""
        cfg = self.cfg
        if x.ndim != 3 or x.shape[-1] != cfg.d_model:
            raise ShapeError(f"block input {x.shape}, expected [B, T, {cfg.d_model}]")
        b, t, _ = x.shape
        di, gn = cfg.d_inner, cfg.n_groups * cfg.d_state

        proj = self.in_proj(x)
        z = proj[:, :, :di]
        xbc_raw = proj[:, :, di : di + cfg.conv_dim]
        dt_raw = proj[:, :, di + cfg.conv_dim :]

        prefix = state.conv_tail if state is not None else None
        xbc = tz.silu(tz.conv1d_depthwise_causal(xbc_raw, self.conv_w, self.conv_b, prefix))
        xs = tz.reshape(xbc[:, :, :di], (b, t, cfg.n_heads, cfg.head_dim))
        bmat = tz.reshape(xbc[:, :, di : di + gn], (b, t, cfg.n_groups, cfg.d_state))
        cmat = tz.reshape(xbc[:, :, di + gn :], (b, t, cfg.n_groups, cfg.d_state))

        dt = tz.softplus(tz.add(dt_raw, self.dt_bias))
        a = tz.neg(tz.exp(self.log_a))
        params = ssd.SelectiveParams(dt=dt, a=a, B=bmat, C=cmat, x=xs)

        initial = state.ssm if state is not None else None
        traj = None
        if mode == "recurrent" or collect_states:
            res = ssd.scan_recurrent(params, initial=initial, collect_states=collect_states)
            y, final = res[0], res[1]
            if collect_states:
                traj = res[2]
        elif mode == "chunked":
            y, final = ssd.scan_chunked(params, chunk_len=chunk_len, initial=initial)
        elif mode == "convolutional":
            y = ssd.scan_convolutional(params, initial=initial)
            final = None
        else:
            raise ContractError(f"unknown scan mode {mode!r}")

        y = tz.add(y, tz.mul(xs, tz.reshape(self.skip, (1, 1, cfg.n_heads, 1))))
        y = tz.reshape(y, (b, t, di))
        gated = tz.mul(y, tz.silu(z))
        out = self.out_proj(tz.rms_norm(gated, self.gate_norm))

        results = [out]
        if return_state:
            if final is None:
                raise ContractError("convolutional mode does not produce a carried state")
            tail_src = tz.concat([prefix, xbc_raw], axis=1) if prefix is not None else xbc_raw
            if tail_src.shape[1] < cfg.conv_width - 1:
                pad = tz.zeros((b, cfg.conv_width - 1 - tail_src.shape[1], cfg.conv_dim),
                               dtype=tail_src.dtype)
                tail_src = tz.concat([pad, tail_src], axis=1)
            new_tail = tail_src[:, tail_src.shape[1] - (cfg.conv_width - 1) :, :]
            results.append(BlockState(ssm=final, conv_tail=new_tail))
        if collect_states:
            results.append(traj)
        return results[0] if len(results) == 1 else tuple(results)

    __call__ = forward


class SsmLm:
    """Residual stack of blocks with RMS pre-norm, final norm, and LM head.

    The input is a sequence of model-dimension embedding vectors, so audio
    embeddings can bypass the token table entirely.
    """

    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.embedding = Tensor(rng.standard_normal((cfg.vocab_size, d)) / np.sqrt(d))
        self.blocks = [MambaBlock(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = tz.ones((d,))
        self.lm_head = None
        if not cfg.tie_embeddings:
            self.lm_head = Tensor(rng.standard_normal((d, cfg.vocab_size)) / np.sqrt(d))

    def parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding, "final_norm": self.final_norm}
        if self.lm_head is not None:
            out["lm_head"] = self.lm_head
        for i, blk in enumerate(self.blocks):
            for k, v in blk.parameters().items():
                out[f"blocks.{i}.{k}"] = v
        return out

    def head_matrix(self) -> Tensor:
        if self.lm_head is not None:
            return self.lm_head
        return tz.transpose(self.embedding, (1, 0))

    def initial_states(self, batch: int, dtype=None) -> list[BlockState]:
        return [blk.initial_state(batch, dtype) for blk in self.blocks]

    def forward(
        self,
        embs: Tensor,
        mode: str = "chunked",
        chunk_len: int = ssd.DEFAULT_CHUNK,
        states: list[BlockState] | None = None,
        return_states: bool = False,
        collect_states: bool = False,
    ):
        """embs: [B, T, D] -> logits [B, T, vocab]."""
        if embs.ndim != 3 or embs.shape[-1] != self.cfg.d_model:
            raise ShapeError(
                f"embedding input {embs.shape}, expected [B, T, {self.cfg.d_model}]"
            )
        x = embs
        new_states = []
        traces = []
        for i, blk in enumerate(self.blocks):
            st = states[i] if states is not None else None
            res = blk.forward(
                tz.rms_norm(x, blk.res_norm),
                mode=mode,
                chunk_len=chunk_len,
                state=st,
                return_state=return_states,
                collect_states=collect_states,
            )
            if return_states and collect_states:
                y, ns, traj = res
                new_states.append(ns)
                traces.append(traj)
            elif return_states:
                y, ns = res
                new_states.append(ns)
            elif collect_states:
                y, traj = res
                traces.append(traj)
            else:
                y = res
            x = tz.add(x, y)
        x = tz.rms_norm(x, self.final_norm)
        logits = tz.matmul(x, self.head_matrix())
        out = [logits]
        if return_states:
            out.append(new_states)
        if collect_states:
            out.append(traces)
        return out[0] if len(out) == 1 else tuple(out)

    __call__ = forward


def lm_forward(lm: SsmLm, embs: Tensor, mode: str = "chunked",
               chunk_len: int = ssd.DEFAULT_CHUNK) -> Tensor:
    return lm.forward(embs, mode=mode, chunk_len=chunk_len)


def attach_lora(lm: SsmLm, rank: int, rng: np.random.Generator) -> None:
    """Attach fresh adapters to in_proj and out_proj of every block."""
    for blk in lm.blocks:
        blk.in_proj.adapter = LoraAdapter.init(blk.cfg.d_model, blk.cfg.d_in_proj, rank, rng)
        blk.out_proj.adapter = LoraAdapter.init(blk.cfg.d_inner, blk.cfg.d_model, rank, rng)


def detach_lora(lm: SsmLm) -> None:
    for blk in lm.blocks:
        blk.in_proj.adapter = None
        blk.out_proj.adapter = None


def lora_parameters(lm: SsmLm) -> dict[str, Tensor]:
    out = {}
    for i, blk in enumerate(lm.blocks):
        for proj_name, proj in (("in_proj", blk.in_proj), ("out_proj", blk.out_proj)):
            if proj.adapter is not None:
                out[f"blocks.{i}.{proj_name}.lora.down"] = proj.adapter.down
                out[f"blocks.{i}.{proj_name}.lora.up"] = proj.adapter.up
    return out


# Tensor-name mapping to the reference Mamba-2 checkpoint layout, kept so a
# future import of real pretrained weights knows where each array lands.
# Import itself is out of scope at desk scale (we train from random init).
PRETRAINED_NAME_MAP = {
    "embedding": "backbone.embedding.weight",
    "final_norm": "backbone.norm_f.weight",
    "blocks.{i}.res_norm": "backbone.layers.{i}.norm.weight",
    "blocks.{i}.in_proj.base": "backbone.layers.{i}.mixer.in_proj.weight (transposed)",
    "blocks.{i}.conv.weight": "backbone.layers.{i}.mixer.conv1d.weight (K x C layout)",
    "blocks.{i}.conv.bias": "backbone.layers.{i}.mixer.conv1d.bias",
    "blocks.{i}.dt_bias": "backbone.layers.{i}.mixer.dt_bias",
    "blocks.{i}.log_a": "backbone.layers.{i}.mixer.A_log",
    "blocks.{i}.skip": "backbone.layers.{i}.mixer.D",
    "blocks.{i}.gate_norm": "backbone.layers.{i}.mixer.norm.weight",
    "blocks.{i}.out_proj.base": "backbone.layers.{i}.mixer.out_proj.weight (transposed)",
    "lm_head": "lm_head.weight (transposed; absent when tied)",
}


def import_pretrained(path: str) -> None:
    """Stub: real-checkpoint ingestion is deliberately unimplemented."""
    raise NotImplementedError(
        "pretrained Mamba-2 checkpoints are outside desk scale; "
        "see PRETRAINED_NAME_MAP for where each tensor would land"
    )
