"""Coupling layer between the three diffusion models.

Everything that makes the tasks talk to each other lives here: the learned
condition encoders (pooled token-set vectors for text, image and graph), the
attention fusion of graph codes into image decoding, the two alignment
decoders, surrogate autoregressive marginals, the duality-gap regularizer,
the mutual KL terms that teach the graph denoiser from the dual task's
intermediate latents, and the four-stage training driver.

Stage boundaries follow the freeze contract: stage 4 updates exactly the
three denoisers plus the two latent projectors, nothing else.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .diffusion import Denoiser, NoiseSchedule, denoise_step, forward_sample, sample_reverse, vlb_loss
from .numerics import AdamW, ParamStore, Rng, Tensor, concat, constant, embedding, gather_last, normal_init
from .quantize import (
    PAD_CODE, DgaeParams, dgae_decode, dgae_encode, dgae_loss, tokens_to_grid,
)
from .scenegraph import SceneGraph, graph_from_obj, is_isomorphic, triplet_recall
from .toyworld import (
    IMG_SIDE, K_IMG, K_TEXT, TOY_N_MAX, record_image, record_text, toy_vocabulary,
)

TEXT_LEN = 24
TEXT_WINDOW = 4
IMG_CELL = 2

K_GRAPH = 125


# ---------------------------------------------------------------------------
# Condition encoders


class ConditionEncoders:
    """Learned token-set embeddings for the three condition domains.

    Text pools word embeddings over fixed windows, images pool tile
    embeddings over supercells, and graphs keep one vector per grid slot
    with a PAD mask.  Each condition is a short sequence of d-dimensional
    vectors ready for cross-attention or fusion.
    """

    def __init__(self, store: ParamStore, prefix: str = "cond",
                 d_model: int = 32, rng: Rng | None = None):
        if TEXT_LEN % TEXT_WINDOW or IMG_SIDE % IMG_CELL:
            raise ValueError("pooling windows must tile the token grids")
        self.store = store
        self.prefix = prefix
        self.d = d_model
        self.n_text = TEXT_LEN // TEXT_WINDOW
        self.n_img = (IMG_SIDE // IMG_CELL) ** 2
        init = normal_init(rng if rng is not None else Rng(3, 29), 0.3)
        p = self._param
        p("txt.emb", (K_TEXT, d_model), init)
        p("txt.pos", (self.n_text, d_model), init)
        p("txt.fpos", (TEXT_LEN, d_model), init)
        p("img.emb", (K_IMG, d_model), init)
        p("img.pos", (self.n_img, d_model), init)
        p("img.fpos", (IMG_SIDE * IMG_SIDE, d_model), init)
        p("gph.emb", (K_GRAPH, d_model), init)
        p("gph.pos", (TOY_N_MAX, d_model), init)

    def _param(self, name, shape, init):
        return self.store.param(f"{self.prefix}.{name}", shape, init)

    def _p(self, name) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def text_conditions(self, tokens) -> Tensor:
        """(B, 24) word tokens -> (B, 6, d) pooled window vectors."""
        arr = np.asarray(tokens, dtype=np.int64).reshape(-1, TEXT_LEN)
        e = embedding(self._p("txt.emb"), arr)
        pooled = e.reshape(arr.shape[0], self.n_text, TEXT_WINDOW, self.d).mean(axis=2)
        return pooled + self._p("txt.pos")

    def image_conditions(self, grids) -> Tensor:
        """(B, 12, 12) tile tokens -> (B, 36, d) pooled supercell vectors."""
        arr = np.asarray(grids, dtype=np.int64).reshape(-1, IMG_SIDE, IMG_SIDE)
        e = embedding(self._p("img.emb"), arr)
        side = IMG_SIDE // IMG_CELL
        e = e.reshape(arr.shape[0], side, IMG_CELL, side, IMG_CELL, self.d)
        pooled = e.mean(axis=4).mean(axis=2).reshape(arr.shape[0], self.n_img, self.d)
        return pooled + self._p("img.pos")

    def graph_conditions(self, grids):
        """(B, 56) graph codes -> ((B, 56, d) vectors, (B, 56) PAD mask)."""
        arr = np.asarray(grids, dtype=np.int64).reshape(-1, TOY_N_MAX)
        e = embedding(self._p("gph.emb"), arr) + self._p("gph.pos")
        return e, (arr != PAD_CODE).astype(np.float64)

    # full-resolution vectors for the alignment decoders
    def text_vectors(self, tokens) -> Tensor:
        arr = np.asarray(tokens, dtype=np.int64).reshape(TEXT_LEN)
        return embedding(self._p("txt.emb"), arr) + self._p("txt.fpos")

    def image_vectors(self, grid) -> Tensor:
        arr = np.asarray(grid, dtype=np.int64).reshape(IMG_SIDE * IMG_SIDE)
        return embedding(self._p("img.emb"), arr) + self._p("img.fpos")

    def graph_vectors(self, grid_tokens):
        arr = np.asarray(grid_tokens, dtype=np.int64).reshape(TOY_N_MAX)
        e = embedding(self._p("gph.emb"), arr) + self._p("gph.pos")
        return e, (arr != PAD_CODE).astype(np.float64)


# ---------------------------------------------------------------------------
# Fusion and the alignment decoders


@dataclass
class FusedLatent:
    """Per image position: own code vector concatenated with the
    attention-pooled graph code vector; weights kept for inspection."""

    vectors: Tensor
    weights: np.ndarray


def fuse_attention(zG: Tensor, zI: Tensor, pad_mask=None) -> FusedLatent:
    """Pool graph code vectors into every image position by dot-product
    attention and concatenate: out[i] = zI[i] (+) sum_m a_im zG[m]."""
    if zG.shape[0] == 0:
        raise ValueError("no graph context")
    scores = zI @ zG.swapaxes(0, 1)
    if pad_mask is not None:
        mask = np.asarray(pad_mask, dtype=np.float64).reshape(zG.shape[0])
        if not np.any(mask > 0):
            raise ValueError("no graph context")
        scores = scores + constant((mask - 1.0) * 1e9)
    attn = scores.softmax_last()
    pooled = attn @ zG
    return FusedLatent(concat([zI, pooled], axis=-1), attn.data.copy())


class ImageDecoder:
    """Position-wise two-layer head from fused vectors to tile logits."""

    def __init__(self, store: ParamStore, prefix: str = "gv",
                 d_fused: int = 64, rng: Rng | None = None):
        init = normal_init(rng if rng is not None else Rng(5, 31), 0.3)
        h = d_fused
        self.store, self.prefix = store, prefix
        store.param(f"{prefix}.w1", (d_fused, h), init)
        store.param(f"{prefix}.b1", (h,), np.zeros(h))
        store.param(f"{prefix}.w2", (h, K_IMG), init)
        store.param(f"{prefix}.b2", (K_IMG,), np.zeros(K_IMG))

    def __call__(self, fused: FusedLatent) -> Tensor:
        s, px = self.store, self.prefix
        hidden = (fused.vectors @ s[f"{px}.w1"] + s[f"{px}.b1"]).relu()
        return hidden @ s[f"{px}.w2"] + s[f"{px}.b2"]


def decode_image(fused: FusedLatent, dec: ImageDecoder) -> Tensor:
    return dec(fused)


class TextDecoder:
    """One-block causal attention decoder over [text latent; graph codes].

    The latent vectors form a fully visible prefix; word positions attend
    to the prefix and to strictly earlier words, shifted-input style, so
    the chain rule of the emitted sentence is exact.
    """

    def __init__(self, store: ParamStore, prefix: str = "gt",
                 d_model: int = 32, rng: Rng | None = None):
        init = normal_init(rng if rng is not None else Rng(7, 37), 0.3)
        d = d_model
        self.store, self.prefix, self.d = store, prefix, d
        p = store.param
        p(f"{prefix}.emb", (K_TEXT, d), init)
        p(f"{prefix}.pos", (TEXT_LEN, d), init)
        for w in ("wq", "wk", "wv", "wo"):
            p(f"{prefix}.attn.{w}", (d, d), init)
        p(f"{prefix}.ff.w1", (d, 2 * d), init)
        p(f"{prefix}.ff.b1", (2 * d,), np.zeros(2 * d))
        p(f"{prefix}.ff.w2", (2 * d, d), init)
        p(f"{prefix}.ff.b2", (d,), np.zeros(d))
        p(f"{prefix}.head.w", (d, K_TEXT), init)
        p(f"{prefix}.head.b", (K_TEXT,), np.zeros(K_TEXT))

    def logits(self, prefix_vectors, words) -> Tensor:
        """Word logits at every position given teacher-forced inputs.

        ``prefix_vectors``: (M, d) Tensor or None; ``words``: (L,) tokens.
        Position i consumes word i-1 (position 0 consumes PAD as start).
        """
        s, px = self.store, self.prefix
        w = np.asarray(words, dtype=np.int64)
        L = w.shape[0]
        shifted = np.concatenate([[0], w[:-1]])
        x = embedding(s[f"{px}.emb"], shifted) + embedding_rows(s[f"{px}.pos"], L)
        if prefix_vectors is not None:
            x = concat([prefix_vectors, x], axis=0)
            m = prefix_vectors.shape[0]
        else:
            m = 0
        S = m + L
        allow = np.zeros((S, S))
        for i in range(S):
            for j in range(S):
                if j >= m and (i < m or j > i):
                    allow[i, j] = -1e9
        q = x @ s[f"{px}.attn.wq"]
        k = x @ s[f"{px}.attn.wk"]
        v = x @ s[f"{px}.attn.wv"]
        att = ((q @ k.swapaxes(0, 1)) * (1.0 / np.sqrt(self.d))
               + constant(allow)).softmax_last()
        x = x + (att @ v) @ s[f"{px}.attn.wo"]
        x = x + (x @ s[f"{px}.ff.w1"] + s[f"{px}.ff.b1"]).relu() @ s[f"{px}.ff.w2"] \
            + s[f"{px}.ff.b2"]
        out = embedding(x, np.arange(m, S))
        return out @ s[f"{px}.head.w"] + s[f"{px}.head.b"]

    def sample(self, prefix_vectors, rng: Rng, max_len: int = TEXT_LEN):
        """Ancestral sampling until PAD; returns a PAD-filled length-24 array."""
        out = np.zeros(max_len, dtype=np.int64)
        for i in range(max_len):
            logits = self.logits(prefix_vectors, out[:i + 1]).data[i]
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            tok = rng.categorical(probs.tolist())
            out[i] = tok
            if tok == 0:
                break
        return out


def embedding_rows(table: Tensor, count: int) -> Tensor:
    """First ``count`` rows of an embedding table, with gradients."""
    return embedding(table, np.arange(count))


def decode_text(zY, zG, words, dec: TextDecoder) -> Tensor:
    """Word logits given the concatenated [text; graph] latent prefix."""
    if zY is None:
        prefix = zG
    elif zG is None:
        prefix = zY
    else:
        prefix = concat([zY, zG], axis=0)
    return dec.logits(prefix, words)


def alignment_losses(image, text, z_img, z_txt, z_gph, cond: ConditionEncoders,
                     img_dec: ImageDecoder, txt_dec: TextDecoder):
    """Stage-2 reconstruction pair (L_v-dec, L_t-dec) for one sample.

    ``z_img``/``z_txt``/``z_gph`` are the clean token arrays of the three
    latent domains (for the toy world the image and text latents are the
    observable tokens themselves).  Image loss is cross-entropy over tile
    tokens of the graph-fused decoder; text loss is the negative likelihood
    of the sentence under the prefix decoder, scored through the first PAD
    (the stop decision) and ignoring the rest.
    """
    img_target = np.asarray(image, dtype=np.int64).reshape(-1)
    zI = cond.image_vectors(z_img)
    zG, mask = cond.graph_vectors(z_gph)
    fused = fuse_attention(zG, zI, mask)
    logits_i = img_dec(fused)
    lv = -gather_last(logits_i.log_softmax_last(), img_target).sum()

    words = np.asarray(text, dtype=np.int64).reshape(TEXT_LEN)
    zY = cond.text_vectors(z_txt)
    logits_t = decode_text(zY, zG, words, txt_dec)
    logp = gather_last(logits_t.log_softmax_last(), words)
    keep = np.zeros(TEXT_LEN)
    for i, t in enumerate(words):
        keep[i] = 1.0
        if t == 0:
            break
    lt = -(logp * constant(keep)).sum()
    return lv, lt


# ---------------------------------------------------------------------------
# Surrogate marginals


class MarginalModel:
    """Window-8 autoregressive categorical model of one token domain.

    Shared token embeddings for the context, flattened into an affine
    head; positions left of the window edge read a dedicated
    begin-of-sequence row.  PAD targets are excluded by contract.
    """

    WINDOW = 8

    def __init__(self, store: ParamStore, prefix: str, vocab_size: int,
                 pad: int | None = None, d: int = 16, rng: Rng | None = None):
        init = normal_init(rng if rng is not None else Rng(9, 41), 0.3)
        self.store, self.prefix = store, prefix
        self.V = vocab_size
        self.pad = pad
        self.d = d
        store.param(f"{prefix}.emb", (vocab_size + 1, d), init)  # +1: BOS row
        store.param(f"{prefix}.head.w", (self.WINDOW * d, vocab_size), init)
        store.param(f"{prefix}.head.b", (vocab_size,), np.zeros(vocab_size))

    def _context(self, tokens: np.ndarray) -> np.ndarray:
        n = tokens.shape[0]
        ctx = np.full((n, self.WINDOW), self.V, dtype=np.int64)
        for i in range(n):
            lo = max(0, i - self.WINDOW)
            got = tokens[lo:i]
            if got.size:
                ctx[i, -got.size:] = got
        return ctx

    def _logits(self, tokens: np.ndarray) -> Tensor:
        s, px = self.store, self.prefix
        ctx = self._context(tokens)
        e = embedding(s[f"{px}.emb"], ctx)
        flat = e.reshape(tokens.shape[0], self.WINDOW * self.d)
        return flat @ s[f"{px}.head.w"] + s[f"{px}.head.b"]

    def nll(self, tokens) -> Tensor:
        """Differentiable negative log-likelihood (PAD targets excluded)."""
        arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if np.any(arr < 0) or np.any(arr >= self.V):
            raise ValueError("token outside the model alphabet")
        logp = gather_last(self._logits(arr).log_softmax_last(), arr)
        if self.pad is None:
            return -logp.sum()
        keep = (arr != self.pad).astype(np.float64)
        return -(logp * constant(keep)).sum()

    def logprob(self, tokens) -> float:
        return -self.nll(tokens).item()


def marginal_logprob(m: MarginalModel, tokens) -> float:
    return m.logprob(tokens)


def marginal_fit(corpus, vocab_size: int, pad: int | None = None,
                 store: ParamStore | None = None, prefix: str = "marg",
                 d: int = 16, epochs: int = 2, lr: float = 1e-2,
                 seed: int = 5, model: MarginalModel | None = None) -> MarginalModel:
    """Maximum-likelihood fit; the model is held fixed by later stages."""
    if model is None:
        store = store if store is not None else ParamStore()
        model = MarginalModel(store, prefix, vocab_size, pad, d, Rng(seed, 43))
    else:
        store, prefix = model.store, model.prefix
    opt = AdamW(store, lr=lr, warmup_steps=20)
    names = [n for n in store.names() if n.startswith(prefix)]
    rng = Rng(seed, 47)
    idx = list(range(len(corpus)))
    for _ in range(epochs):
        rng.shuffle(idx)
        for b0 in range(0, len(idx), 16):
            opt.zero_grad()
            batch = idx[b0:b0 + 16]
            for i in batch:
                (model.nll(corpus[i]) * (1.0 / len(batch))).backward()
            for n in store.names():
                if n not in names:
                    store[n].grad = None
            opt.step()
    return model


# ---------------------------------------------------------------------------
# Duality and mutual losses


def duality_loss(lp_i, lp_y_given_i, lp_y, lp_i_given_y):
    """Squared duality gap |log p(i) + log p(y|i) - log p(y) - log p(i|y)|^2.

    The conditional terms may be Tensors (negated VLB surrogates) so the
    gap can train both conditional models; the marginals are plain floats.
    """
    terms = [lp_i, lp_y_given_i, lp_y, lp_i_given_y]
    for v in terms:
        val = v.item() if isinstance(v, Tensor) else float(v)
        if not np.isfinite(val):
            raise ValueError("duality terms must be finite")
    gap = _as_term(lp_i) + _as_term(lp_y_given_i) - _as_term(lp_y) \
        - _as_term(lp_i_given_y)
    return gap * gap


def _as_term(v):
    return v if isinstance(v, Tensor) else constant(np.asarray(float(v)))


class DualProjector:
    """Embeds the dual task's noised latent into condition space for the
    graph denoiser; trained only in stage 4."""

    def __init__(self, store: ParamStore, prefix: str, vocab_size: int,
                 length: int, d_model: int = 32, rng: Rng | None = None):
        init = normal_init(rng if rng is not None else Rng(11, 53), 0.3)
        self.store, self.prefix, self.length = store, prefix, length
        store.param(f"{prefix}.emb", (vocab_size, d_model), init)
        store.param(f"{prefix}.pos", (length, d_model), init)

    def __call__(self, tokens) -> Tensor:
        arr = np.asarray(tokens, dtype=np.int64).reshape(-1, self.length)
        s, px = self.store, self.prefix
        return embedding(s[f"{px}.emb"], arr) + s[f"{px}.pos"]


def mutual_alignment_kl(schedule: NoiseSchedule, psi: Denoiser, zG_t, t: int,
                        c_global, z_dual_t, t_dual: int,
                        projector: DualProjector, c_global_mask=None):
    """KL between the graph denoiser's step conditioned on the global
    modality summary and conditioned on the dual task's noised latent.

    Both conditions are constants of their producing models: the global
    vectors are detached and the dual latent enters as integer tokens, so
    gradients reach only the graph denoiser and the projector.
    """
    if t != t_dual:
        raise ValueError(f"timestep mismatch: graph at {t}, dual latent at {t_dual}")
    zt = np.asarray(zG_t, dtype=np.int64).reshape(1, -1)
    cg = constant(c_global.data) if isinstance(c_global, Tensor) else constant(c_global)
    p_glob = denoise_step(schedule, psi, zt, t, cg, cond_mask=c_global_mask)
    p_dual = denoise_step(schedule, psi, zt, t, projector(z_dual_t))
    return (p_glob * (p_glob.log() - p_dual.log())).sum()


# ---------------------------------------------------------------------------
# The full model collection


class SD3Models:
    """Every component of the coupled system on one parameter store.

    Construction is deterministic in ``seed``; all stages and checkpoints
    share the same parameter name set, so snapshots taken after any stage
    restore into a freshly built collection.
    """

    def __init__(self, d_model: int = 32, T: int = 64, n_blocks: int = 2,
                 dgae_hidden: int = 64, seed: int = 11):
        self.store = ParamStore()
        self.vocab = toy_vocabulary()
        self.d_model = d_model
        self.T = T
        self.sched_img = NoiseSchedule(T, K_IMG)
        self.sched_txt = NoiseSchedule(T, K_TEXT)
        self.sched_gph = NoiseSchedule(T, K_GRAPH)
        rng = Rng(seed, 61)
        self.dgae = DgaeParams(self.store, "dgae", self.vocab,
                               d_hidden=dgae_hidden, rng=rng)
        self.cond = ConditionEncoders(self.store, "cond", d_model, rng)
        self.theta = Denoiser(self.store, "theta", K_IMG, IMG_SIDE * IMG_SIDE,
                              T, d_model, n_blocks, rng)
        self.phi = Denoiser(self.store, "phi", K_TEXT, TEXT_LEN,
                            T, d_model, n_blocks, rng)
        self.psi = Denoiser(self.store, "psi", K_GRAPH, TOY_N_MAX,
                            T, d_model, n_blocks, rng)
        self.img_dec = ImageDecoder(self.store, "gv", 2 * d_model, rng)
        self.txt_dec = TextDecoder(self.store, "gt", d_model, rng)
        self.proj_img = DualProjector(self.store, "proj_i", K_IMG,
                                      IMG_SIDE * IMG_SIDE, d_model, rng)
        self.proj_txt = DualProjector(self.store, "proj_t", K_TEXT,
                                      TEXT_LEN, d_model, rng)
        self.marg_img = MarginalModel(self.store, "marg_i", K_IMG, None,
                                      16, rng)
        self.marg_txt = MarginalModel(self.store, "marg_t", K_TEXT, 0,
                                      16, rng)

    def encode_graph(self, g: SceneGraph) -> np.ndarray:
        """Gold graph -> padded code grid for diffusion and conditioning."""
        tokens, _ = dgae_encode(g, self.dgae)
        return tokens_to_grid(tokens, TOY_N_MAX)

    def decode_graph(self, grid) -> SceneGraph:
        return dgae_decode(np.asarray(grid, dtype=np.int64), self.dgae).graph


# Freeze contract: which parameter prefixes each stage may update.
STAGE_TRAINABLE = {
    1: ("dgae.",),
    2: ("cond.", "gv.", "gt.", "marg_i.", "marg_t."),
    3: ("psi.",),
    4: ("theta.", "phi.", "psi.", "proj_i.", "proj_t."),
}

DEFAULT_WEIGHTS = {
    "theta": 1.0, "phi": 1.0, "dual": 1.0, "mutual": 1.0,
    "graph_cond": 1.0, "v_dec": 1.0, "t_dec": 1.0,
}

ABLATIONS = {
    "full": {},
    "vanilla": {"graph_cond": 0.0},
    "singleton": {"graph_cond": 0.0, "dual": 0.0, "mutual": 0.0},
}


def ablation_weights(name: str) -> dict:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}")
    out = dict(DEFAULT_WEIGHTS)
    out.update(ABLATIONS[name])
    return out


@dataclass
class StagePlan:
    """One stage's training recipe; validated on construction."""

    stage: int
    epochs: int = 1
    lr: float = 5e-5
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.0
    warmup: int = 200
    weights: dict = field(default_factory=dict)
    mutual_samples: int = 2

    def __post_init__(self):
        if self.stage not in STAGE_TRAINABLE:
            raise ValueError(f"unknown stage {self.stage}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch size and lr must be positive")
        merged = dict(DEFAULT_WEIGHTS)
        for k, v in self.weights.items():
            if k not in DEFAULT_WEIGHTS:
                raise ValueError(f"unknown loss weight {k!r}")
            if v < 0:
                raise ValueError("loss weights must be non-negative")
            merged[k] = float(v)
        self.weights = merged

    def weight(self, key: str) -> float:
        return self.weights[key]


def _config_hash(plan: StagePlan, models: SD3Models) -> str:
    blob = json.dumps({
        "stage": plan.stage, "epochs": plan.epochs, "lr": plan.lr,
        "batch": plan.batch_size, "seed": plan.seed,
        "decay": plan.weight_decay, "warmup": plan.warmup,
        "weights": plan.weights, "mutual_samples": plan.mutual_samples,
        "d_model": models.d_model, "T": models.T,
    }, sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _record_parts(rec, vocab):
    image = record_image(rec)
    text = record_text(rec)
    sg3d = graph_from_obj(rec["sg3d"], vocab)
    return image, text, sg3d


def _freeze_others(store: ParamStore, prefixes) -> None:
    for name in store.names():
        if not name.startswith(prefixes):
            store[name].grad = None


def train_stage(plan: StagePlan, dataset: list, ckpt_in: str | None = None,
                ckpt_out: str | None = None, models: SD3Models | None = None,
                holdout: list | None = None, model_kw: dict | None = None) -> dict:
    """Run one training stage over toy-world records and report progress.

    Stage 1 fits the graph autoencoder; stage 2 the condition encoders
    plus alignment decoders, then the surrogate marginals; stage 3 the
    graph denoiser under each single-modality condition; stage 4 the
    coupled dual objective, updating only the three denoisers and the two
    latent projectors.  Stages above 1 must start from the previous
    stage's snapshot (``ckpt_in`` or a warm ``models``).
    """
    if models is None:
        models = SD3Models(seed=plan.seed, **(model_kw or {}))
        if plan.stage > 1:
            if ckpt_in is None or not os.path.exists(ckpt_in):
                raise ValueError(
                    f"stage {plan.stage} requires the stage {plan.stage - 1} checkpoint")
            restore_into(models.store, load_checkpoint(ckpt_in))
    trainable = STAGE_TRAINABLE[plan.stage]
    opt = AdamW(models.store, lr=plan.lr, weight_decay=plan.weight_decay,
                warmup_steps=plan.warmup)
    rng = Rng(plan.seed, 100 + plan.stage)
    runner = {1: _run_stage1, 2: _run_stage2, 3: _run_stage3, 4: _run_stage4}[plan.stage]
    epochs = runner(plan, models, dataset, holdout or [], opt, rng, trainable)
    report = {
        "stage": plan.stage,
        "epochs": epochs,
        "seed": plan.seed,
        "config-hash": _config_hash(plan, models),
    }
    if ckpt_out is not None:
        save_checkpoint(ckpt_out, models.store)
    return report


def _epoch_order(n: int, rng: Rng) -> list:
    idx = list(range(n))
    rng.shuffle(idx)
    return idx


def _cosine(base: float, ep: int, total: int) -> float:
    return base * 0.5 * (1.0 + np.cos(np.pi * ep / max(total - 1, 1)))


def _run_stage1(plan, models, dataset, holdout, opt, rng, trainable):
    vocab = models.vocab
    graphs = [_record_parts(r, vocab)[2] for r in dataset]
    held = [_record_parts(r, vocab)[2] for r in holdout]
    epochs = []
    for ep in range(plan.epochs):
        opt.base_lr = _cosine(plan.lr, ep, plan.epochs)
        order = _epoch_order(len(graphs), rng)
        total = 0.0
        for b0 in range(0, len(order), plan.batch_size):
            batch = order[b0:b0 + plan.batch_size]
            opt.zero_grad()
            for i in batch:
                g = graphs[i]
                tokens, zq = dgae_encode(g, models.dgae)
                dec = dgae_decode(tokens, models.dgae, z_latent=zq)
                loss, _ = dgae_loss(g, dec, models.dgae)
                (loss * (1.0 / len(batch))).backward()
                total += loss.item()
            _freeze_others(models.store, trainable)
            opt.step()
        entry = {"epoch": ep, "losses": {"dgae": total / len(graphs)}, "metrics": {}}
        if held and ep == plan.epochs - 1:
            entry["metrics"] = _stage1_metrics(models, held)
        epochs.append(entry)
    return epochs


def _stage1_metrics(models, held):
    iso = 0
    recall = []
    for g in held:
        out = models.decode_graph(models.encode_graph(g))
        iso += int(is_isomorphic(out, g))
        recall.append(triplet_recall(out, g, models.vocab))
    return {"recon_iso": iso / len(held),
            "triplet_recall": float(np.mean(recall))}


def _run_stage2(plan, models, dataset, holdout, opt, rng, trainable):
    vocab = models.vocab
    parts = [_record_parts(r, vocab) for r in dataset]
    grids = [models.encode_graph(g) for _, _, g in parts]
    epochs = []
    for ep in range(plan.epochs):
        opt.base_lr = _cosine(plan.lr, ep, plan.epochs)
        order = _epoch_order(len(parts), rng)
        tot_v = tot_t = 0.0
        for b0 in range(0, len(order), plan.batch_size):
            batch = order[b0:b0 + plan.batch_size]
            opt.zero_grad()
            for i in batch:
                image, text, _ = parts[i]
                lv, lt = alignment_losses(image, text, image, text, grids[i],
                                          models.cond, models.img_dec,
                                          models.txt_dec)
                loss = lv * plan.weight("v_dec") + lt * plan.weight("t_dec")
                (loss * (1.0 / len(batch))).backward()
                tot_v += lv.item()
                tot_t += lt.item()
            _freeze_others(models.store, trainable)
            opt.step()
        epochs.append({"epoch": ep,
                       "losses": {"v_dec": tot_v / len(parts),
                                  "t_dec": tot_t / len(parts)},
                       "metrics": {}})
    # Surrogate marginals are fitted once the encoders settle, then frozen.
    imgs = [p[0].reshape(-1) for p in parts]
    txts = [p[1] for p in parts]
    marginal_fit(imgs, K_IMG, model=models.marg_img, epochs=2, seed=plan.seed)
    marginal_fit(txts, K_TEXT, pad=0, model=models.marg_txt, epochs=2,
                 seed=plan.seed + 1)
    epochs[-1]["metrics"] = {
        "marginal_img_nll": float(np.mean([models.marg_img.nll(x).item() for x in imgs[:64]])),
        "marginal_txt_nll": float(np.mean([models.marg_txt.nll(x).item() for x in txts[:64]])),
    }
    return epochs


def _run_stage3(plan, models, dataset, holdout, opt, rng, trainable):
    vocab = models.vocab
    parts = [_record_parts(r, vocab) for r in dataset]
    grids = np.stack([models.encode_graph(g) for _, _, g in parts])
    images = np.stack([p[0] for p in parts])
    texts = np.stack([p[1] for p in parts])
    epochs = []
    for ep in range(plan.epochs):
        opt.base_lr = _cosine(plan.lr, ep, plan.epochs)
        order = _epoch_order(len(parts), rng)
        tot_i = tot_t = 0.0
        for b0 in range(0, len(order), plan.batch_size):
            batch = order[b0:b0 + plan.batch_size]
            opt.zero_grad()
            g_b = grids[batch]
            c_txt = models.cond.text_conditions(texts[batch])
            c_img = models.cond.image_conditions(images[batch])
            l_t, _ = vlb_loss(models.sched_gph, models.psi, g_b, c_txt, rng)
            l_i, _ = vlb_loss(models.sched_gph, models.psi, g_b, c_img, rng)
            (l_t + l_i).backward()
            tot_t += l_t.item() * len(batch)
            tot_i += l_i.item() * len(batch)
            _freeze_others(models.store, trainable)
            opt.step()
        epochs.append({"epoch": ep,
                       "losses": {"t23d": tot_t / len(parts),
                                  "i23d": tot_i / len(parts)},
                       "metrics": {}})
    return epochs


def joint_condition(models, text=None, image=None, graph=None):
    """Stack the available conditions along the set axis with a PAD mask."""
    parts, masks = [], []
    if text is not None:
        c = models.cond.text_conditions(text)
        parts.append(c)
        masks.append(np.ones(c.shape[:2]))
    if image is not None:
        c = models.cond.image_conditions(image)
        parts.append(c)
        masks.append(np.ones(c.shape[:2]))
    if graph is not None:
        c, m = models.cond.graph_conditions(graph)
        parts.append(c)
        masks.append(m)
    if not parts:
        raise ValueError("at least one condition is required")
    if len(parts) == 1:
        return parts[0], masks[0]
    return concat(parts, axis=1), np.concatenate(masks, axis=1)


def _run_stage4(plan, models, dataset, holdout, opt, rng, trainable):
    vocab = models.vocab
    parts = [_record_parts(r, vocab) for r in dataset]
    grids = np.stack([models.encode_graph(g) for _, _, g in parts])
    images = np.stack([p[0].reshape(-1) for p in parts])
    texts = np.stack([p[1] for p in parts])
    lp_img = np.array([models.marg_img.logprob(x) for x in images])
    lp_txt = np.array([models.marg_txt.logprob(x) for x in texts])
    w = plan.weight
    use_graph = w("graph_cond") > 0
    epochs = []
    for ep in range(plan.epochs):
        opt.base_lr = _cosine(plan.lr, ep, plan.epochs)
        order = _epoch_order(len(parts), rng)
        sums = {"theta": 0.0, "phi": 0.0, "dual": 0.0, "mutual": 0.0}
        for b0 in range(0, len(order), plan.batch_size):
            batch = order[b0:b0 + plan.batch_size]
            opt.zero_grad()
            i_b, t_b, g_b = images[batch], texts[batch], grids[batch]
            cond_th, mask_th = joint_condition(
                models, text=t_b, graph=g_b if use_graph else None)
            cond_ph, mask_ph = joint_condition(
                models, image=i_b.reshape(-1, IMG_SIDE, IMG_SIDE),
                graph=g_b if use_graph else None)
            vlb_th, info_th = vlb_loss(models.sched_img, models.theta, i_b,
                                       cond_th, rng, mask_th)
            vlb_ph, info_ph = vlb_loss(models.sched_txt, models.phi, t_b,
                                       cond_ph, rng, mask_ph)
            loss = vlb_th * w("theta") + vlb_ph * w("phi")
            sums["theta"] += vlb_th.item() * len(batch)
            sums["phi"] += vlb_ph.item() * len(batch)
            if w("dual") > 0:
                # The per-step estimate times T plus the prior constant is
                # the full negative evidence bound, the likelihood stand-in
                # the duality gap calls for.
                full_th = vlb_th * float(models.T) + info_th["prior_kl"]
                full_ph = vlb_ph * float(models.T) + info_ph["prior_kl"]
                gap = duality_loss(float(np.mean(lp_img[batch])),
                                   full_ph * -1.0,
                                   float(np.mean(lp_txt[batch])),
                                   full_th * -1.0)
                loss = loss + gap * w("dual")
                sums["dual"] += gap.item() * len(batch)
            if w("mutual") > 0:
                c_txt = models.cond.text_conditions(t_b)
                c_img = models.cond.image_conditions(
                    i_b.reshape(-1, IMG_SIDE, IMG_SIDE))
                m_t, _ = vlb_loss(models.sched_gph, models.psi, g_b, c_txt, rng)
                m_i, _ = vlb_loss(models.sched_gph, models.psi, g_b, c_img, rng)
                mutual = m_t + m_i
                picks = [batch[rng.randint(len(batch))]
                         for _ in range(min(plan.mutual_samples, len(batch)))]
                for j in picks:
                    t_step = 1 + rng.randint(models.T)
                    zg_t = forward_sample(models.sched_gph, grids[j], t_step, rng)
                    zt_t = forward_sample(models.sched_txt, texts[j], t_step, rng)
                    zi_t = forward_sample(models.sched_img, images[j], t_step, rng)
                    c_y = models.cond.text_conditions(texts[j][None])
                    c_i = models.cond.image_conditions(
                        images[j].reshape(1, IMG_SIDE, IMG_SIDE))
                    kl_y = mutual_alignment_kl(models.sched_gph, models.psi,
                                               zg_t, t_step, c_y, zt_t, t_step,
                                               models.proj_txt)
                    kl_i = mutual_alignment_kl(models.sched_gph, models.psi,
                                               zg_t, t_step, c_i, zi_t, t_step,
                                               models.proj_img)
                    mutual = mutual + (kl_y + kl_i) * (1.0 / len(picks))
                loss = loss + mutual * w("mutual")
                sums["mutual"] += mutual.item() * len(batch)
            loss.backward()
            _freeze_others(models.store, trainable)
            opt.step()
        epochs.append({"epoch": ep,
                       "losses": {k: v / len(parts) for k, v in sums.items()},
                       "metrics": {}})
    return epochs


# ---------------------------------------------------------------------------
# Task-level sampling


def sample_graph_tokens(models: SD3Models, rng: Rng, text=None, image=None,
                        stride: int = 1) -> np.ndarray:
    """Draw 3DSG code grids from the graph denoiser, conditioned on
    whichever modalities are present; shape (B, 56)."""
    cond, mask = joint_condition(models, text=text, image=image)
    return sample_reverse(models.sched_gph, models.psi, cond, rng, stride, mask)


def sample_st2i(models: SD3Models, text, rng: Rng, stride: int = 1,
                use_graph: bool = True):
    """Text -> (tile grid, graph code grid): the scene graph is sampled to
    completion first, then conditions the image denoiser."""
    t = np.asarray(text, dtype=np.int64).reshape(1, TEXT_LEN)
    g = sample_graph_tokens(models, rng, text=t, stride=stride)
    cond, mask = joint_condition(models, text=t, graph=g if use_graph else None)
    tiles = sample_reverse(models.sched_img, models.theta, cond, rng, stride, mask)
    return tiles.reshape(IMG_SIDE, IMG_SIDE), g[0]


def sample_si2t(models: SD3Models, image, rng: Rng, stride: int = 1,
                use_graph: bool = True):
    """Image -> (word tokens, graph code grid), graph first."""
    img = np.asarray(image, dtype=np.int64).reshape(1, IMG_SIDE, IMG_SIDE)
    g = sample_graph_tokens(models, rng, image=img, stride=stride)
    cond, mask = joint_condition(models, image=img, graph=g if use_graph else None)
    words = sample_reverse(models.sched_txt, models.phi, cond, rng, stride, mask)
    return words[0], g[0]
