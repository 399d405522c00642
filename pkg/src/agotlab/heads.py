"""Prompt heads: fixed phrase, CoOp, CoCoOp, CoT-PT and AGoT.

Every head maps image features ``[d]`` or ``[B, d]`` to prompt tokens
``[L', d_e]`` or ``[B, L', d_e]``. Image-independent heads (fixed, CoOp)
return an unbatched prompt that broadcasts against any batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Mlp3Params,
    Tensor,
    add,
    broadcast_to,
    concat,
    matmul,
    mlp3_forward,
    mul,
    reshape,
    sigmoid,
    softmax_lastdim,
    sub,
)
from .encoders import PROMPT_PHRASE, TextEncoderParams, Vocabulary, embed_tokens
from .errors import ConfigError, DimensionError, EmptyInputError


class HeadKind(str, enum.Enum):
    FIXED = "fixed"
    COOP = "coop"
    COCOOP = "cocoop"
    COTPT = "cotpt"
    AGOT = "agot"

    @classmethod
    def parse(cls, value: "HeadKind | str") -> "HeadKind":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown head {value!r}; expected one of {[k.value for k in cls]}") from None


@dataclass(frozen=True)
class AgotConfig:
    Z: int = 5
    R: int = 4
    L: int = 4
    d_e: int = 32
    d: int = 32
    d_hidden: int = 32

    def __post_init__(self):
        for name in ("Z", "R", "L", "d_e", "d", "d_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"AgotConfig.{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class PromptOutput:
    tokens: Tensor
    meta_token_count: int = 0
    # per-step aggregation weights and flow ratios, for ablation logging
    weights: list[np.ndarray] = field(default_factory=list)
    alphas: list[np.ndarray] = field(default_factory=list)


@dataclass
class AgotStep:
    subnodes: list[Tensor]
    weightnet: Mlp3Params
    metanet: Mlp3Params
    flowcontrol: Mlp3Params

    def tensors(self) -> dict[str, Tensor]:
        out = {f"subnode{r}": t for r, t in enumerate(self.subnodes)}
        for fam in ("weightnet", "metanet", "flowcontrol"):
            for k, t in getattr(self, fam).tensors().items():
                out[f"{fam}.{k}"] = t
        return out


@dataclass
class AgotParams:
    base_prompt: Tensor
    steps: list[AgotStep]

    @property
    def Z(self) -> int:
        return len(self.steps)

    @property
    def R(self) -> int:
        return len(self.steps[0].subnodes)

    def tensors(self) -> dict[str, Tensor]:
        out = {"base_prompt": self.base_prompt}
        for i, step in enumerate(self.steps):
            for k, t in step.tensors().items():
                out[f"step{i}.{k}"] = t
        return out

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: AgotConfig, base: np.ndarray,
             subnode_std: float | None = None, meta_scale: float = 0.1) -> "AgotParams":
        """Gaussian subnodes; ``base`` seeds the chain's starting prompt."""
        if base.shape != (cfg.L, cfg.d_e):
            raise DimensionError(f"base prompt shape {base.shape} != {(cfg.L, cfg.d_e)}")
        std = 1.0 / np.sqrt(cfg.d_e) if subnode_std is None else subnode_std
        steps = []
        for _ in range(cfg.Z):
            subnodes = [Tensor(rng.normal(0.0, std, size=(cfg.L, cfg.d_e)), True) for _ in range(cfg.R)]
            steps.append(AgotStep(
                subnodes=subnodes,
                weightnet=Mlp3Params.init(rng, cfg.d, cfg.d_hidden, cfg.R),
                metanet=Mlp3Params.init(rng, cfg.d, cfg.d_hidden, cfg.L * cfg.d_e, out_scale=meta_scale),
                flowcontrol=Mlp3Params.init(rng, cfg.d, cfg.d_hidden, 1),
            ))
        return cls(Tensor(base.copy(), True), steps)


def check_consistent(params: AgotParams, cfg: AgotConfig) -> None:
    if cfg.Z < 1 or params.Z != cfg.Z:
        raise ConfigError(f"params have {params.Z} steps, config says Z={cfg.Z}")
    if params.base_prompt.shape != (cfg.L, cfg.d_e):
        raise DimensionError(f"base prompt {params.base_prompt.shape} != {(cfg.L, cfg.d_e)}")
    for i, step in enumerate(params.steps):
        if len(step.subnodes) != cfg.R:
            raise ConfigError(f"step {i} has {len(step.subnodes)} subnodes, config says R={cfg.R}")


# ---------------------------------------------------------------- heads


def phrase_embedding(vocab: Vocabulary, params: TextEncoderParams, phrase: str = PROMPT_PHRASE) -> np.ndarray:
    ids = [vocab.id_of(w) for w in phrase.split()]
    return embed_tokens(ids, params).data.copy()


def fixed_prompt(vocab: Vocabulary, params: TextEncoderParams) -> PromptOutput:
    """Hand-written "a photo of a" prompt, never trained."""
    return PromptOutput(Tensor(phrase_embedding(vocab, params)))


def coop_forward(prompt: Tensor) -> PromptOutput:
    return PromptOutput(prompt)


def cocoop_forward(prompt: Tensor, metanet: Mlp3Params, img_feat: Tensor) -> PromptOutput:
    """Learned context followed by one image-conditioned token."""
    d_e = prompt.shape[-1]
    if metanet.widths[2] != d_e:
        raise DimensionError(f"metanet output width {metanet.widths[2]} != prompt width {d_e}")
    cond = mlp3_forward(metanet, img_feat)
    lead = img_feat.shape[:-1]
    cond = reshape(cond, lead + (1, d_e))
    ctx = broadcast_to(prompt, lead + prompt.shape) if lead else prompt
    return PromptOutput(concat([ctx, cond], axis=-2), meta_token_count=1)


def _column(x: Tensor) -> Tensor:
    # [..., 1] -> [..., 1, 1] so a per-example scalar scales an [L, d_e] block
    return reshape(x, x.shape + (1,))


def agot_step(prev: Tensor, step: AgotStep, img_feat: Tensor,
              alpha: float | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """One reasoning step: aggregate subnodes, add visual bias, flow-mix with ``prev``.

    Returns (new prompt, aggregation weights, alpha). A float ``alpha``
    bypasses the flow controller.
    """
    L, d_e = step.subnodes[0].shape
    R = len(step.subnodes)
    lead = img_feat.shape[:-1]
    if any(s.shape != (L, d_e) for s in step.subnodes) or prev.shape[-2:] != (L, d_e):
        raise DimensionError(f"agot_step: subnodes/prev must all be {(L, d_e)}")
    if step.weightnet.widths[2] != R or step.metanet.widths[2] != L * d_e or step.flowcontrol.widths[2] != 1:
        raise DimensionError("agot_step: network output widths do not match (R, L*d_e, 1)")

    weights = softmax_lastdim(mlp3_forward(step.weightnet, img_feat))
    stacked = concat([reshape(s, (1, L * d_e)) for s in step.subnodes], axis=0)
    w_rows = weights if lead else reshape(weights, (1, R))
    central = matmul(w_rows, stacked)
    central = reshape(central, lead + (L, d_e))
    fused = add(central, reshape(mlp3_forward(step.metanet, img_feat), lead + (L, d_e)))

    if alpha is None:
        a = sigmoid(mlp3_forward(step.flowcontrol, img_feat))
    else:
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"fixed alpha must lie in [0, 1], got {alpha}")
        a = Tensor(np.full(lead + (1,), float(alpha)))
    a_col = _column(a)
    out = add(mul(sub(Tensor(1.0), a_col), prev), mul(a_col, fused))
    return out, weights, a


def _fold(params: AgotParams, img_feat: Tensor, alpha: float | None, step_fn) -> PromptOutput:
    state = params.base_prompt
    result = PromptOutput(state)
    for step in params.steps:
        state, w, a = step_fn(state, step, img_feat, alpha)
        result.weights.append(w.data.copy())
        result.alphas.append(a.data.reshape(a.shape[:-1]).copy())
    result.tokens = state
    return result


def agot_forward(params: AgotParams, cfg: AgotConfig, img_feat: Tensor,
                 alpha: float | None = None) -> PromptOutput:
    """Fold reasoning steps 1..Z from the base prompt; returns the last state."""
    check_consistent(params, cfg)
    if img_feat.shape[-1] != cfg.d:
        raise DimensionError(f"image feature width {img_feat.shape[-1]} != d={cfg.d}")
    return _fold(params, img_feat, alpha, agot_step)


def _cot_step(prev: Tensor, step: AgotStep, img_feat: Tensor,
              alpha: float | None) -> tuple[Tensor, Tensor, Tensor]:
    # single-subnode chain link: no aggregation weights to learn
    (node,) = step.subnodes
    L, d_e = node.shape
    lead = img_feat.shape[:-1]
    fused = add(node, reshape(mlp3_forward(step.metanet, img_feat), lead + (L, d_e)))
    if alpha is None:
        a = sigmoid(mlp3_forward(step.flowcontrol, img_feat))
    else:
        a = Tensor(np.full(lead + (1,), float(alpha)))
    a_col = _column(a)
    out = add(mul(sub(Tensor(1.0), a_col), prev), mul(a_col, fused))
    return out, Tensor(np.ones(lead + (1,))), a


def cotpt_forward(params: AgotParams, cfg: AgotConfig, img_feat: Tensor,
                  alpha: float | None = None) -> PromptOutput:
    """Chain-of-thought prompt: the AGoT chain with one subnode per step."""
    if cfg.R != 1:
        raise ConfigError(f"CoT-PT needs R=1, got R={cfg.R}")
    check_consistent(params, cfg)
    if img_feat.shape[-1] != cfg.d:
        raise DimensionError(f"image feature width {img_feat.shape[-1]} != d={cfg.d}")
    return _fold(params, img_feat, alpha, _cot_step)


def build_text_sequence(prompt: PromptOutput, class_ids: Sequence[int] | np.ndarray,
                        params: TextEncoderParams) -> Tensor:
    """[prompt tokens ; class token embeddings] along the token axis.

    ``class_ids`` is one id sequence ``[Lc]`` or a stack ``[K, Lc]``. Leading
    axes combine as prompt-batch then class, e.g. ``[B, K, L'+Lc, d_e]``.
    """
    ids = np.asarray(class_ids, dtype=np.int64)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise EmptyInputError("build_text_sequence: no class tokens")
    cls_emb = embed_tokens(ids, params)  # [..K, Lc, d_e]
    p = prompt.tokens
    p_lead, c_lead = p.shape[:-2], cls_emb.shape[:-2]
    lead = p_lead + c_lead
    if c_lead:
        p = reshape(p, p_lead + (1,) * len(c_lead) + p.shape[-2:])
        p = broadcast_to(p, lead + p.shape[-2:])
    if p_lead:
        cls_emb = Tensor(np.broadcast_to(cls_emb.data, lead + cls_emb.shape[-2:]))
    return concat([p, cls_emb], axis=-2)


# ---------------------------------------------------------------- head wrapper


@dataclass
class PromptHead:
    """Uniform wrapper so training code can treat all heads alike."""

    kind: HeadKind
    cfg: AgotConfig
    agot: AgotParams | None = None
    prompt: Tensor | None = None
    metanet: Mlp3Params | None = None
    fixed: Tensor | None = None
    alpha: float | None = None

    def forward(self, img_feat: Tensor) -> PromptOutput:
        if self.kind is HeadKind.FIXED:
            return PromptOutput(self.fixed)
        if self.kind is HeadKind.COOP:
            return coop_forward(self.prompt)
        if self.kind is HeadKind.COCOOP:
            return cocoop_forward(self.prompt, self.metanet, img_feat)
        if self.kind is HeadKind.COTPT:
            return cotpt_forward(self.agot, self.cfg, img_feat, self.alpha)
        return agot_forward(self.agot, self.cfg, img_feat, self.alpha)

    def parameters(self) -> dict[str, Tensor]:
        """Named tensors that the optimizer updates."""
        if self.kind is HeadKind.FIXED:
            return {}
        if self.kind is HeadKind.COOP:
            return {"prompt": self.prompt}
        if self.kind is HeadKind.COCOOP:
            out = {"prompt": self.prompt}
            out.update({f"metanet.{k}": t for k, t in self.metanet.tensors().items()})
            return out
        named = self.agot.tensors()
        if self.kind is HeadKind.COTPT:
            named = {k: t for k, t in named.items() if ".weightnet." not in k}
        if self.alpha is not None:
            named = {k: t for k, t in named.items() if ".flowcontrol." not in k}
        return named

    def state(self) -> dict[str, Tensor]:
        """Every tensor needed to rebuild the head, trainable or not."""
        if self.kind is HeadKind.FIXED:
            return {"fixed": self.fixed}
        if self.kind in (HeadKind.COOP, HeadKind.COCOOP):
            return self.parameters()
        return self.agot.tensors()


def build_head(kind: HeadKind | str, cfg: AgotConfig, rng: np.random.Generator, vocab: Vocabulary,
               text_params: TextEncoderParams, alpha: float | None = None,
               subnode_std: float | None = None, meta_scale: float = 0.1) -> PromptHead:
    kind = HeadKind.parse(kind)
    if cfg.d_e != text_params.d_embed:
        raise ConfigError(f"agot.d_e={cfg.d_e} but text encoder embeds to {text_params.d_embed}")
    phrase = phrase_embedding(vocab, text_params)
    if cfg.L != phrase.shape[0]:
        # longer contexts repeat the phrase; shorter ones truncate it
        phrase = np.resize(phrase, (cfg.L, cfg.d_e))
    if kind is HeadKind.FIXED:
        return PromptHead(kind, cfg, fixed=Tensor(phrase_embedding(vocab, text_params)))
    if kind is HeadKind.COOP:
        return PromptHead(kind, cfg, prompt=Tensor(phrase, True))
    if kind is HeadKind.COCOOP:
        return PromptHead(kind, cfg, prompt=Tensor(phrase, True),
                          metanet=Mlp3Params.init(rng, cfg.d, cfg.d_hidden, cfg.d_e, out_scale=meta_scale))
    if kind is HeadKind.COTPT and cfg.R != 1:
        raise ConfigError(f"CoT-PT needs R=1, got R={cfg.R}")
    params = AgotParams.init(rng, cfg, phrase, subnode_std=subnode_std, meta_scale=meta_scale)
    return PromptHead(kind, cfg, agot=params, alpha=alpha)
