"""Discrete diffusion over token grids with uniform-noise transitions.

One corruption step keeps a token with probability ``alpha_t + beta_t`` and
otherwise resamples it uniformly, which is the column-stochastic kernel
``Q_t = alpha_t*I + beta_t*ones``.  This family is closed under composition,
so cumulative kernels, skip-step kernels and exact one-step posteriors all
have closed forms.  The denoiser predicts a distribution over the clean
token and the reverse step averages exact posteriors under that prediction,
which makes strided sampling and oracle tests possible.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, Tensor, constant, embedding, gather_last, layer_norm, normal_init


class NoiseSchedule:
    """Corruption schedule over ``T`` steps for an alphabet of ``K`` tokens.

    ``abars[t]`` is the probability that a token survives all steps up to
    ``t`` via the identity part of the kernel; it falls linearly from 1 to
    ``abar_final`` so the terminal state is near-uniform.
    """

    def __init__(self, T: int, K: int, kind: str = "linear", abar_final: float = 0.01):
        if T < 1:
            raise ValueError("schedule needs at least one step")
        if K < 2:
            raise ValueError("alphabet size must be at least 2")
        if kind != "linear":
            raise ValueError(f"invalid schedule kind: {kind!r}")
        if not 0.0 < abar_final < 0.05:
            raise ValueError("abar_final must be in (0, 0.05) so the terminal state is near-uniform")
        self.T = T
        self.K = K
        self.kind = kind
        steps = np.arange(T + 1, dtype=np.float64)
        self.abars = 1.0 - (1.0 - abar_final) * steps / T
        self.alphas = np.ones(T + 1)
        self.alphas[1:] = self.abars[1:] / self.abars[:-1]
        self.betas = (1.0 - self.alphas) / K

    def transition(self, t: int) -> np.ndarray:
        """One-step kernel Q_t; entry [i, j] is P(token j -> token i)."""
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return self.alphas[t] * np.eye(self.K) + self.betas[t] * np.ones((self.K, self.K))

    def cumulative(self, t: int) -> np.ndarray:
        """Composed kernel from step 0 to ``t`` in closed form."""
        if not 0 <= t <= self.T:
            raise ValueError(f"step {t} outside [0, {self.T}]")
        a = self.abars[t]
        return a * np.eye(self.K) + ((1.0 - a) / self.K) * np.ones((self.K, self.K))


@dataclass(frozen=True)
class DiffusionState:
    """A token grid together with its corruption step."""

    z: np.ndarray
    t: int

    def validate(self, schedule: NoiseSchedule):
        z = np.asarray(self.z)
        if not 0 <= self.t <= schedule.T:
            raise ValueError(f"step {self.t} outside [0, {schedule.T}]")
        if z.size and (z.min() < 0 or z.max() >= schedule.K):
            raise ValueError("token out of range")


def forward_sample(schedule: NoiseSchedule, z_0, t: int, rng: Rng) -> np.ndarray:
    """Corrupt ``z_0`` to step ``t`` with one uniform draw per position.

    A draw below ``abars[t]`` keeps the token; the remainder of the unit
    interval is split evenly over the alphabet, so the marginal is exactly
    the ``z_0`` column of the cumulative kernel.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")
    z0 = np.asarray(z_0)
    if z0.size and (z0.min() < 0 or z0.max() >= schedule.K):
        raise ValueError("token out of range")
    abar = schedule.abars[t]
    out = np.empty(z0.size, dtype=np.int64)
    flat = z0.reshape(-1)
    for i in range(flat.size):
        u = rng.uniform()
        if u < abar:
            out[i] = flat[i]
        else:
            k = int((u - abar) / (1.0 - abar) * schedule.K)
            out[i] = min(k, schedule.K - 1)
    return out.reshape(z0.shape)


def _coeff(schedule, t, prev_t):
    """Closed-form mixture coefficients for steps ``prev_t`` and ``t``.

    Returns (a_eff, b_eff, a_prev, b_prev, a_t, b_t): the identity and
    uniform weights of the skip kernel prev->t, of the cumulative kernel at
    prev, and of the cumulative kernel at t.  ``t`` and ``prev_t`` may be
    arrays; each coefficient then has the same shape.
    """
    t = np.asarray(t, dtype=np.int64)
    prev = np.asarray(prev_t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"step outside [1, {schedule.T}]")
    if np.any(prev < 0) or np.any(prev >= t):
        raise ValueError("previous step must lie in [0, t)")
    a_t = schedule.abars[t]
    a_prev = schedule.abars[prev]
    a_eff = a_t / a_prev
    K = schedule.K
    return a_eff, (1.0 - a_eff) / K, a_prev, (1.0 - a_prev) / K, a_t, (1.0 - a_t) / K


def q_posterior(schedule: NoiseSchedule, z_t, z_0, t, prev_t=None) -> np.ndarray:
    """Exact posterior over the step-``prev_t`` token given ``z_t`` and ``z_0``.

    ``t`` (and ``prev_t``, default ``t - 1``) may be scalars or arrays
    broadcastable against the token arrays; the result appends an alphabet
    axis.  With ``prev_t = 0`` this is a point mass on ``z_0``.
    """
    zt = np.asarray(z_t)
    z0 = np.asarray(z_0)
    if prev_t is None:
        prev_t = np.asarray(t) - 1
    a_eff, b_eff, a_prev, b_prev, _, _ = _coeff(schedule, t, prev_t)
    eye = np.eye(schedule.K)
    like = a_eff[..., None] * eye[zt] + b_eff[..., None]
    prior = a_prev[..., None] * eye[z0] + b_prev[..., None]
    post = like * prior
    return post / post.sum(axis=-1, keepdims=True)


def _mix_step(schedule, probs_x0: Tensor, z_t, t, prev_t) -> Tensor:
    """Average the exact posteriors q(z_prev | z_t, k) under ``probs_x0``.

    Works per position in O(K): weight each clean-token hypothesis by its
    predicted probability over its forward likelihood, then apply the
    closed-form posterior kernel to the weighted sums.
    """
    zt = np.asarray(z_t)
    a_eff, b_eff, a_prev, b_prev, a_t, b_t = _coeff(schedule, t, prev_t)
    onehot = np.eye(schedule.K)[zt]
    denom = constant(a_t[..., None] * onehot + b_t[..., None])
    w = probs_x0 / denom
    s = w.sum(axis=-1, keepdims=True)
    mix = constant(a_prev[..., None]) * w + constant(b_prev[..., None]) * s
    like = constant(a_eff[..., None] * onehot + b_eff[..., None])
    return like * mix


def _time_table(T: int, d: int) -> np.ndarray:
    """Sinusoidal step embeddings for t in [0, T], shape (T+1, d)."""
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.arange(T + 1, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Denoiser:
    """Per-position clean-token predictor p(z_0 | z_t, conditions).

    Token, position and step embeddings feed ``n_blocks`` pre-norm blocks
    of self-attention over positions, cross-attention over the condition
    vectors, and a feed-forward layer; a linear head emits K logits per
    position.  Deterministic given parameters and inputs.
    """

    def __init__(self, store, prefix: str, K: int, num_positions: int, T: int,
                 d_model: int = 32, n_blocks: int = 2, rng: Rng | None = None):
        if d_model % 2:
            raise ValueError("d_model must be even")
        self.store = store
        self.prefix = prefix
        self.K = K
        self.num_positions = num_positions
        self.d_model = d_model
        self.n_blocks = n_blocks
        self.times = _time_table(T, d_model)
        init = normal_init(rng if rng is not None else Rng(0, 7), 0.02)
        p = self._param
        p("tok", (K, d_model), init)
        p("pos", (num_positions, d_model), init)
        for i in range(n_blocks):
            for part in (f"b{i}.self", f"b{i}.cross"):
                p(f"{part}.ln_g", (d_model,), np.ones(d_model))
                p(f"{part}.ln_b", (d_model,), np.zeros(d_model))
                for w in ("wq", "wk", "wv", "wo"):
                    p(f"{part}.{w}", (d_model, d_model), init)
            p(f"b{i}.ff.ln_g", (d_model,), np.ones(d_model))
            p(f"b{i}.ff.ln_b", (d_model,), np.zeros(d_model))
            p(f"b{i}.ff.w1", (d_model, 2 * d_model), init)
            p(f"b{i}.ff.b1", (2 * d_model,), np.zeros(2 * d_model))
            p(f"b{i}.ff.w2", (2 * d_model, d_model), init)
            p(f"b{i}.ff.b2", (d_model,), np.zeros(d_model))
        p("out.ln_g", (d_model,), np.ones(d_model))
        p("out.ln_b", (d_model,), np.zeros(d_model))
        p("out.w", (d_model, K), init)
        p("out.b", (K,), np.zeros(K))

    def _param(self, name, shape, init):
        return self.store.param(f"{self.prefix}.{name}", shape, init)

    def _ln(self, x, part):
        return layer_norm(x, self._p(f"{part}.ln_g"), self._p(f"{part}.ln_b"))

    def _p(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def _attend(self, part, queries, keys_values, mask_add=None):
        q = queries @ self._p(f"{part}.wq")
        k = keys_values @ self._p(f"{part}.wk")
        v = keys_values @ self._p(f"{part}.wv")
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(self.d_model))
        if mask_add is not None:
            scores = scores + constant(mask_add)
        return (scores.softmax_last() @ v) @ self._p(f"{part}.wo")

    def logits(self, z_t, t, cond, cond_mask=None) -> Tensor:
        """K logits per position, shape (B, N, K).

        ``cond`` holds condition vectors, shape (B, M, d_model); positions
        with ``cond_mask`` zero are hidden from cross-attention.
        """
        zt = np.asarray(z_t)
        if zt.ndim != 2 or zt.shape[1] != self.num_positions:
            raise ValueError(f"state must have shape (B, {self.num_positions})")
        B = zt.shape[0]
        if not isinstance(cond, Tensor):
            cond = constant(np.asarray(cond, dtype=np.float64))
        if cond.ndim != 3 or cond.shape[0] != B:
            raise ValueError("condition set must have shape (B, M, d_model)")
        if cond.shape[-1] != self.d_model:
            raise ValueError(
                f"condition dimensionality mismatch: got {cond.shape[-1]}, expected {self.d_model}")
        if cond_mask is None:
            mask_add = None
        else:
            cond_mask = np.asarray(cond_mask, dtype=np.float64)
            if cond_mask.shape != cond.shape[:2]:
                raise ValueError("condition mask must have shape (B, M)")
            mask_add = ((cond_mask - 1.0) * 1e9)[:, None, :]
        tt = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        x = embedding(self._p("tok"), zt) + self._p("pos") \
            + constant(self.times[tt][:, None, :])
        for i in range(self.n_blocks):
            h = self._ln(x, f"b{i}.self")
            x = x + self._attend(f"b{i}.self", h, h)
            x = x + self._attend(f"b{i}.cross", self._ln(x, f"b{i}.cross"), cond, mask_add)
            h = self._ln(x, f"b{i}.ff") @ self._p(f"b{i}.ff.w1") + self._p(f"b{i}.ff.b1")
            x = x + h.relu() @ self._p(f"b{i}.ff.w2") + self._p(f"b{i}.ff.b2")
        return self._ln(x, "out") @ self._p("out.w") + self._p("out.b")


def denoise_step(schedule: NoiseSchedule, den: Denoiser, z_t, t: int, cond,
                 cond_mask=None, prev_t: int | None = None) -> Tensor:
    """Distribution over the step-``prev_t`` grid, shape (B, N, K).

    ``prev_t`` defaults to ``t - 1``; any earlier step works because the
    kernel family composes in closed form.  At ``prev_t = 0`` the predicted
    clean-token distribution is returned directly.
    """
    if prev_t is None:
        prev_t = t - 1
    _coeff(schedule, t, prev_t)
    zt = np.asarray(z_t)
    probs = den.logits(zt, t, cond, cond_mask).softmax_last()
    if prev_t == 0:
        return probs
    return _mix_step(schedule, probs, zt, t, prev_t)


def vlb_loss(schedule: NoiseSchedule, den: Denoiser, z_0, cond, rng: Rng,
             cond_mask=None) -> tuple[Tensor, dict]:
    """Single-sample variational bound on -log p(z_0 | cond).

    Draws one step t per batch item uniformly from [1, T]; items with t > 1
    contribute the posterior KL at that step and items with t = 1 contribute
    the clean-token reconstruction term, each summed over positions and
    averaged over the batch.  The constant terminal-state KL is reported in
    the info dict but carries no gradient.
    """
    z0 = np.asarray(z_0)
    B, N = z0.shape
    t = np.array([1 + rng.randint(schedule.T) for _ in range(B)], dtype=np.int64)
    z_t = np.stack([forward_sample(schedule, z0[b], int(t[b]), rng) for b in range(B)])

    logp = den.logits(z_t, t, cond, cond_mask).log_softmax_last()
    recon_rows = -gather_last(logp, z0).sum(axis=1)

    # Rows with t = 1 take the reconstruction term, so give them dummy
    # step-2 coefficients here: the KL value is finite and masked out.
    t_kl = np.maximum(t, 2)[:, None]
    post = q_posterior(schedule, z_t, z0, t_kl)
    step = _mix_step(schedule, logp.exp(), z_t, t_kl, t_kl - 1)
    ent = np.sum(post * np.log(post), axis=-1)
    kl_rows = (constant(post) * step.log()).sum(axis=-1)
    kl_rows = (constant(ent) - kl_rows).sum(axis=1)

    is_recon = (t == 1).astype(np.float64)
    loss = (constant(is_recon) * recon_rows
            + constant(1.0 - is_recon) * kl_rows).mean()

    a_T = schedule.abars[schedule.T]
    b_T = (1.0 - a_T) / schedule.K
    keep = a_T + b_T
    prior_kl = N * (keep * np.log(keep * schedule.K)
                    + (schedule.K - 1) * b_T * np.log(b_T * schedule.K))
    info = {
        "t": t,
        "kl": float(np.sum((1.0 - is_recon) * kl_rows.data) / B),
        "recon": float(np.sum(is_recon * recon_rows.data) / B),
        "prior_kl": float(prior_kl),
    }
    return loss, info


def sample_reverse(schedule: NoiseSchedule, den: Denoiser, cond, rng: Rng,
                   stride: int = 1, cond_mask=None) -> np.ndarray:
    """Generate token grids by walking the reverse chain, shape (B, N).

    Starts uniform at step T and moves down in multiples of ``stride``;
    the final step takes the argmax of the clean-token prediction.
    """
    if stride < 1 or schedule.T % stride:
        raise ValueError(f"stride must divide T = {schedule.T}")
    cond_arr = cond.data if isinstance(cond, Tensor) else np.asarray(cond)
    B = cond_arr.shape[0]
    N = den.num_positions
    z = np.array([[rng.randint(schedule.K) for _ in range(N)] for _ in range(B)],
                 dtype=np.int64)
    for t in range(schedule.T, 0, -stride):
        dist = denoise_step(schedule, den, z, t, cond, cond_mask,
                            prev_t=t - stride).data
        if t - stride == 0:
            z = np.argmax(dist, axis=-1)
        else:
            for b in range(B):
                for n in range(N):
                    z[b, n] = rng.categorical(dist[b, n])
    return z
