"""Two-level grouping encoder with prototype-guided group tokens.

Each level concatenates its input tokens with learnable group tokens, runs a
few pre-norm transformer blocks over the joint sequence, and then pools the
patch tokens onto the (now sample-dependent) group tokens with a
:func:`~protoseg.sgm.group_block`.  Before pooling, the patch tokens receive
the EM reconstruction of the level's input tokens as a residual, and the
group tokens are pulled toward their matched prototypes (image prototypes
from the level input, scalar text prototypes from the caption embedding).

Parameters live in a flat ``dict[str, ndarray]``; prototypes live in a
separate dict and are never differentiated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import npr
from .losses import it_contrastive, total_loss
from .numerics import Array, NumericsError, Tensor, concat, l2_normalize, layer_norm
from .sgm import AssignmentMatrix, GroupingParams, group_block, one_hot_columns


@dataclass
class EncoderConfig:
    d_raw: int = 16
    d: int = 32
    c: int = 32
    vocab: int = 7
    q: tuple[int, ...] = (8, 4)
    n_protos: tuple[int, ...] | None = None  # per-level prototype counts; default q
    layers_per_level: int = 2
    mlp_ratio: int = 2
    gumbel_temperature: float = 1.0
    bg_threshold: float = 0.2
    ema_gamma: float = 0.9
    lam: float = 0.1
    beta: float = 0.01
    tau: float = 0.1
    tau_it: float = 0.1
    phi: float = 0.1
    em_iterations: int = 10
    em_normalize: bool = False
    warmup_frac: float = 0.6

    def __post_init__(self):
        self.q = tuple(int(x) for x in self.q)
        if self.n_protos is None:
            self.n_protos = self.q
        self.n_protos = tuple(int(x) for x in self.n_protos)
        if len(self.n_protos) != len(self.q):
            raise ValueError("n_protos must list one count per level")
        for name in ("d_raw", "d", "c", "vocab", "layers_per_level", "mlp_ratio", "em_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.q or min(self.q) < 1 or min(self.n_protos) < 1:
            raise ValueError("group and prototype counts must be positive")
        for name in ("gumbel_temperature", "tau", "tau_it"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ema_gamma <= 1.0:
            raise ValueError("ema_gamma must lie in [0, 1]")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must lie in [0, 1]")

    @property
    def levels(self) -> int:
        return len(self.q)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["q"] = list(self.q)
        out["n_protos"] = list(self.n_protos)
        return out


# -- parameters ----------------------------------------------------------------

def init_params(cfg: EncoderConfig, seed: int) -> dict[str, Array]:
    rng = np.random.default_rng([seed, 0x5EED])
    d, h = cfg.d, cfg.d * cfg.mlp_ratio

    def lin(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    p: dict[str, Array] = {"embed.w": lin(cfg.d_raw, d), "embed.b": np.zeros(d)}
    for lv in range(cfg.levels):
        p[f"l{lv}.groups"] = rng.normal(0.0, 1.0, size=(cfg.q[lv], d))
        for i in range(cfg.layers_per_level):
            b = f"l{lv}.b{i}."
            for w in ("wq", "wk", "wv", "wo"):
                p[b + w] = lin(d, d)
            p[b + "w1"], p[b + "b1"] = lin(d, h), np.zeros(h)
            p[b + "w2"], p[b + "b2"] = lin(h, d) * 0.5, np.zeros(d)
        for w in ("w_q", "w_k", "w_v"):
            p[f"l{lv}.sgm.{w}"] = lin(d, d)
    p["head.proj"] = lin(d, cfg.c)
    p["text.embed"] = rng.normal(0.0, 1.0, size=(cfg.vocab, cfg.c))
    p["text.proj"] = lin(cfg.c, cfg.c)
    return p


def init_prototypes(cfg: EncoderConfig, seed: int) -> dict[str, Array]:
    rng = np.random.default_rng([seed, 0x9707])
    out = {}
    for lv in range(cfg.levels):
        out[f"l{lv}.image"] = rng.normal(0.0, 1.0, size=(cfg.n_protos[lv], cfg.d))
        out[f"l{lv}.text"] = rng.normal(0.0, 1.0, size=(cfg.q[lv], 1))
    return out


def as_tensors(params: dict[str, Array], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def _block(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    h = layer_norm(x)
    q, k, v = h @ p[prefix + "wq"], h @ p[prefix + "wk"], h @ p[prefix + "wv"]
    att = ((q @ k.T) * (1.0 / np.sqrt(x.shape[-1]))).softmax(axis=-1)
    x = x + (att @ v) @ p[prefix + "wo"]
    h = layer_norm(x)
    return x + ((h @ p[prefix + "w1"] + p[prefix + "b1"]).gelu() @ p[prefix + "w2"] + p[prefix + "b2"])


def grouping_params(p: dict[str, Tensor], level: int, cfg: EncoderConfig) -> GroupingParams:
    b = f"l{level}.sgm."
    return GroupingParams(p[b + "w_q"], p[b + "w_k"], p[b + "w_v"], cfg.gumbel_temperature)


# -- text ----------------------------------------------------------------------

def caption_weights(captions: list[list[int]], vocab: int) -> Array:
    """Row-normalized bag-of-tokens matrix; row i averages caption i's tokens."""
    w = np.zeros((len(captions), vocab))
    for i, cap in enumerate(captions):
        if len(cap) == 0:
            raise NumericsError("empty caption")
        for t in cap:
            if not 0 <= t < vocab:
                raise NumericsError(f"token {t} outside vocabulary of {vocab}")
            w[i, t] += 1.0
        w[i] /= len(cap)
    return w


def encode_text(captions: list[list[int]], p: dict[str, Tensor]) -> Tensor:
    """(n, c) unit rows: mean token embedding, projected, L2-normalized."""
    vocab = p["text.embed"].shape[0]
    w = Tensor(caption_weights(captions, vocab))
    return l2_normalize((w @ p["text.embed"]) @ p["text.proj"])


# -- PG unit -------------------------------------------------------------------

@dataclass
class LevelCache:
    """EM and matching results that stay fixed under parameter perturbation."""

    p_t: Array
    y_t: Array
    group_idx: Array
    proto_idx: Array
    selected: Array
    text_t: Array | None = None
    text_order: tuple[Array, Array] | None = None


@dataclass
class PgUnitOutput:
    s_next: Tensor
    assignment: AssignmentMatrix
    pg_image: Tensor  # (n,)
    pg_text: Tensor  # (n,)
    p_t: Array
    text_t: Array | None
    sgm_input: Tensor
    groups: Tensor
    cache: LevelCache


def _unit_rows(x: Array) -> Array:
    """Rows scaled to unit norm; all-zero rows (a collapsed prototype) stay zero."""
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-300)


def _batched_match(g: Array, p: Array, phi: float) -> tuple[Array, Array, Array]:
    sims = np.clip(_unit_rows(g) @ np.swapaxes(_unit_rows(p), -1, -2), -1.0, 1.0)
    gi, pi, sel = [], [], []
    for j in range(sims.shape[0]):
        m = npr.hrs_select(npr.match_similarity(sims[j]), phi)
        gi.append(m.group_idx)
        pi.append(m.proto_idx)
        sel.append(m.selected)
    return np.stack(gi), np.stack(pi), np.stack(sel)


def _sorted_pairs(avg: Array, t: Array) -> tuple[Array, Array]:
    """Optimal 1-D assignment of equal-size scalar sets: pair by rank."""
    return np.argsort(avg, axis=-1, kind="stable"), np.argsort(t, axis=-1, kind="stable")


def t_npr_loss(g: Tensor, t_protos, z_t, tau: float = 0.1, em: npr.EmConfig = npr.EmConfig(),
               cache: LevelCache | None = None) -> tuple[Tensor, Array, tuple[Array, Array]]:
    """Align the per-group feature average with scalar text prototypes.

    The c entries of each caption embedding are the 1-D sources for EM on the
    q scalar prototypes.  Pairs are formed by sorted order and scored with
    s(a, b) = -|a - b| inside the symmetric contrastive loss.  ``g`` is
    (..., q, d), ``t_protos`` (..., q, 1) initial prototypes, ``z_t`` (..., c).
    Returns (loss (...,), updated prototypes (..., q, 1), pairing).
    """
    avg = g.mean(axis=-1)  # (..., q)
    q = avg.shape[-1]
    if cache is not None and cache.text_t is not None:
        t_t, order = cache.text_t, cache.text_order
    else:
        z = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t, dtype=np.float64)
        src = z[..., :, None]
        init = np.broadcast_to(np.asarray(t_protos, dtype=np.float64), avg.shape + (1,))
        t_t, _ = npr.run_em(src, init, em)
        order = _sorted_pairs(avg.data, t_t[..., 0])
    if q == 1:
        return avg.sum(axis=-1) * 0.0, t_t, order
    sim = -(avg.reshape(*avg.shape, 1) - Tensor(np.swapaxes(t_t, -1, -2))).abs()
    sel = np.ones(order[0].shape, dtype=bool)
    loss = npr.contrastive_from_similarity(sim, order[0], order[1], sel, tau)
    return loss, t_t, order


def pg_unit_forward(v: Array, s: Tensor, g: Tensor, gp: GroupingParams, protos: Array,
                    text_protos: Array, z_t: Tensor | None, cfg: EncoderConfig, seed: int | None,
                    step: int = 0, level: int = 0, hard: bool = True,
                    cache: LevelCache | None = None, losses: bool = True) -> PgUnitOutput:
    """One PG unit over a batch.

    ``v`` (n, m, d) are the level's input tokens (source for image prototypes),
    ``s`` the same tokens after the transformer blocks, ``g`` (n, q, d) the
    group tokens after the blocks.  ``seed=None`` disables Gumbel noise.
    """
    em = npr.EmConfig(cfg.em_iterations, cfg.em_normalize)
    n = s.shape[0]
    if cache is None:
        init = np.broadcast_to(np.asarray(getattr(protos, "data", protos)), (n,) + np.shape(protos))
        p_t, y_t = npr.run_em(v, init, em)
        gi, pi, sel = _batched_match(g.data, p_t, cfg.phi)
        cache = LevelCache(p_t, y_t, gi, pi, sel)
    s_in = s + npr.reconstruct(cache.y_t, cache.p_t)
    s_hat, a = group_block(layer_norm(s_in), layer_norm(g), gp, seed=seed, hard=hard,
                           step=step, level=level)
    zero = Tensor(np.zeros(n))
    pg_image = pg_text = zero
    text_t = None
    if losses and cfg.lam > 0:
        sim = l2_normalize(g) @ Tensor(np.swapaxes(_unit_rows(cache.p_t), -1, -2))
        pg_image = npr.contrastive_from_similarity(sim, cache.group_idx, cache.proto_idx,
                                                   cache.selected, cfg.tau)
    if losses and cfg.beta > 0 and z_t is not None:
        tp = getattr(text_protos, "data", text_protos)
        pg_text, text_t, order = t_npr_loss(g, tp, z_t, cfg.tau, em, cache)
        cache.text_t, cache.text_order = text_t, order
    return PgUnitOutput(s_hat, a, pg_image, pg_text, cache.p_t, text_t, s_in, g, cache)


# -- image encoder ------------------------------------------------------------

@dataclass
class EncodeOutput:
    z_i: Tensor  # (n, c) unit rows
    group_embed: Tensor  # (n, q_L, c) unit rows
    units: list[PgUnitOutput] = field(default_factory=list)

    @property
    def assignments(self) -> list[AssignmentMatrix]:
        return [u.assignment for u in self.units]


def encode_image(patches, p: dict[str, Tensor], protos: dict[str, Array], cfg: EncoderConfig,
                 seed: int | None, step: int = 0, z_t: Tensor | None = None, hard: bool = True,
                 caches: list[LevelCache] | None = None, losses: bool = True) -> EncodeOutput:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[-1] != cfg.d_raw:
        raise NumericsError(f"patch width {x.shape[-1]} != d_raw {cfg.d_raw}")
    n = x.shape[0]
    tokens = Tensor(x) @ p["embed.w"] + p["embed.b"]
    units = []
    for lv in range(cfg.levels):
        m = tokens.shape[1]
        v = tokens.data
        g0 = p[f"l{lv}.groups"].expand((n,) + p[f"l{lv}.groups"].shape)
        h = concat([tokens, g0], axis=1)
        for i in range(cfg.layers_per_level):
            h = _block(h, p, f"l{lv}.b{i}.")
        s, g = h[:, :m], h[:, m:]
        unit = pg_unit_forward(v, s, g, grouping_params(p, lv, cfg), protos[f"l{lv}.image"],
                               protos[f"l{lv}.text"], z_t, cfg, seed, step, lv + 1, hard,
                               None if caches is None else caches[lv], losses)
        units.append(unit)
        tokens = unit.s_next
    emb = layer_norm(tokens) @ p["head.proj"]
    z_i = l2_normalize(emb.mean(axis=1))
    return EncodeOutput(z_i, l2_normalize(emb), units)


# -- training objective ---------------------------------------------------------

@dataclass
class StepOutput:
    loss: Tensor
    it: Tensor
    pg_image: list[Tensor]
    pg_text: list[Tensor]
    encoded: EncodeOutput
    caches: list[LevelCache]


def forward_loss(p: dict[str, Tensor], protos: dict[str, Array], cfg: EncoderConfig, patches,
                 captions: list[list[int]], seed: int, step: int, lam: float, beta: float,
                 hard: bool = True, caches: list[LevelCache] | None = None) -> StepOutput:
    z_t = encode_text(captions, p)
    run_cfg = cfg if (lam, beta) == (cfg.lam, cfg.beta) else _with_weights(cfg, lam, beta)
    enc = encode_image(patches, p, protos, run_cfg, seed, step, z_t=z_t, hard=hard, caches=caches)
    it = it_contrastive(enc.z_i, z_t, cfg.tau_it)
    pg_i = [u.pg_image for u in enc.units]
    pg_t = [u.pg_text for u in enc.units]
    loss = total_loss(it, pg_i, pg_t, lam, beta)
    return StepOutput(loss, it, pg_i, pg_t, enc, [u.cache for u in enc.units])


def _with_weights(cfg: EncoderConfig, lam: float, beta: float) -> EncoderConfig:
    d = cfg.to_dict()
    d.update(lam=lam, beta=beta)
    return EncoderConfig(**d)


# -- prototypes momentum -------------------------------------------------------

def ema_update(p_old, snapshots, gamma: float = 0.9) -> Array:
    """gamma * P_old + (1 - gamma) * mean of the batch snapshots."""
    p_old = np.asarray(p_old, dtype=np.float64)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    snaps = [np.asarray(s, dtype=np.float64) for s in snapshots]
    if not snaps:
        return p_old.copy()
    batch = np.stack(snaps)
    if batch.shape[1:] != p_old.shape:
        raise NumericsError(f"snapshot shape {batch.shape[1:]} != prototype shape {p_old.shape}")
    return gamma * p_old + (1.0 - gamma) * batch.mean(axis=0)


# -- zero-shot inference --------------------------------------------------------

@dataclass
class Segmentation:
    labels: Array  # (n, m) in {0..K}
    final_assign: Array  # (n, m, q_L)
    group_labels: Array  # (n, q_L)
    group_scores: Array  # (n, q_L)
    encoded: EncodeOutput


def compose_assignments(assignments: list[Array]) -> Array:
    """(n, m, q_L) patch-to-final-group map: A_1^T A_2^T ... A_L^T."""
    out = np.swapaxes(assignments[0], -1, -2)
    for a in assignments[1:]:
        out = out @ np.swapaxes(a, -1, -2)
    return out


def infer_segmentation(patches, class_embeddings, p: dict[str, Tensor], protos: dict[str, Array],
                       cfg: EncoderConfig, threshold: float | None = None,
                       soft: bool = False) -> Segmentation:
    """Label every patch with a class in 1..K, or 0 when no class clears the threshold.

    Assignments are noise-free argmax over the logits (``soft=True``
    composes the plain softmax instead and labels by the heaviest group).
    """
    thr = cfg.bg_threshold if threshold is None else threshold
    cls = np.asarray(getattr(class_embeddings, "data", class_embeddings), dtype=np.float64)
    enc = encode_image(patches, p, protos, cfg, seed=None, hard=not soft, losses=False)
    mats = [u.assignment.values.data for u in enc.units]
    final = compose_assignments(mats)
    scores = enc.group_embed.data @ cls.T  # (n, q_L, K)
    best = scores.argmax(axis=-1)
    best_score = np.take_along_axis(scores, best[..., None], axis=-1)[..., 0]
    group_labels = np.where(best_score > thr, best + 1, 0)
    patch_group = final.argmax(axis=-1)
    labels = np.take_along_axis(group_labels, patch_group, axis=-1)
    return Segmentation(labels, final, group_labels, best_score, enc)


def class_embeddings(p: dict[str, Tensor], num_classes: int) -> Tensor:
    return encode_text([[k] for k in range(1, num_classes + 1)], p)


def hard_assignments(enc: EncodeOutput) -> list[Array]:
    return [one_hot_columns(u.assignment.values.data) for u in enc.units]
