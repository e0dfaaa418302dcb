"""Seq2seq-with-attention program generator.

A bidirectional LSTM encodes the question; an LSTM decoder with additive
attention emits program tokens one at a time. Decoding can be constrained so
that only tokens which still admit a complete program are allowed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import lang
from .autodiff import Tape, Tensor
from .data.templates import QUESTION_VOCAB_SIZE
from .params import ParameterStore, SpectralState, adam_step, spectral_normalize

NEG = -1e9
SN_PARAMS = ("dec.w_ih", "dec.w_hh")
# arity per token id, -1 for specials
_ARITY_TABLE = np.array([lang.ARITY.get(t, -1) for t in range(lang.VOCAB_SIZE)])


@dataclass(frozen=True)
class PGConfig:
    q_vocab: int = QUESTION_VOCAB_SIZE
    q_emb: int = 64
    enc_hidden: int = 128
    dec_hidden: int = 256
    p_emb: int = 64
    attn: int = 256
    init_scale: float = 0.08


@dataclass
class DecodeOutput:
    seq: list[int]              # raw emitted tokens (no specials)
    logprobs: list[float]       # per emitted step
    valid: bool
    repaired: bool
    exec_seq: list[int]         # what the execution engine runs

    @property
    def logprob(self) -> float:
        return float(np.sum(self.logprobs))


class ProgramGenerator:
    def __init__(self, cfg: PGConfig = PGConfig(), rng: np.random.Generator | None = None,
                 spectral_norm: bool = False):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        self.store = ParameterStore()
        s = cfg.init_scale

        def u(*shape):
            return rng.uniform(-s, s, size=shape)

        E, H, D, P, A = cfg.q_emb, cfg.enc_hidden, cfg.dec_hidden, cfg.p_emb, cfg.attn
        add = self.store.add
        add("q_embed", u(cfg.q_vocab, E))
        for d in ("fwd", "bwd"):
            add(f"enc.{d}.w_ih", u(4 * H, E))
            add(f"enc.{d}.w_hh", u(4 * H, H))
            add(f"enc.{d}.b_ih", u(4 * H))
            add(f"enc.{d}.b_hh", u(4 * H))
        add("p_embed", u(lang.VOCAB_SIZE, P))
        add("dec.w_ih", u(4 * D, P + 2 * H))
        add("dec.w_hh", u(4 * D, D))
        add("dec.b_ih", u(4 * D))
        add("dec.b_hh", u(4 * D))
        add("att.w_key", u(A, 2 * H))
        add("att.w_query", u(A, D))
        add("att.v", u(A, 1))
        add("out.w", u(lang.VOCAB_SIZE, D))
        add("out.b", u(lang.VOCAB_SIZE))
        self.sn_states = {k: SpectralState.warm(self.store[k].data, rng) for k in SN_PARAMS}
        self.spectral_norm = spectral_norm

    # ------------------------------------------------------------------
    # parameters

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.store.state_dict()
        for k, st in self.sn_states.items():
            out[f"sn_u.{k}"] = st.u.astype(np.float32)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {k: v for k, v in state.items() if not k.startswith("sn_u.")}
        self.store.load_state_dict(params)
        for k in SN_PARAMS:
            if f"sn_u.{k}" in state:
                self.sn_states[k] = SpectralState(np.asarray(state[f"sn_u.{k}"], dtype=np.float64))

    def clone(self) -> "ProgramGenerator":
        other = object.__new__(ProgramGenerator)
        other.cfg = self.cfg
        other.store = self.store.clone()
        other.sn_states = {k: SpectralState(v.u.copy()) for k, v in self.sn_states.items()}
        other.spectral_norm = self.spectral_norm
        return other

    def decoder_weights(self, update_sn: bool = False, power_iters: int = 1) -> tuple[Tensor, Tensor]:
        """Effective decoder LSTM matrices (spectrally normalized when active)."""
        w_ih, w_hh = self.store["dec.w_ih"], self.store["dec.w_hh"]
        if not self.spectral_norm:
            return w_ih, w_hh
        out = []
        for k, w in zip(SN_PARAMS, (w_ih, w_hh)):
            w_sn, st = spectral_normalize(w, self.sn_states[k], power_iters)
            if update_sn:
                self.sn_states[k] = st
            out.append(w_sn)
        return out[0], out[1]

    def bake_spectral_norm(self, power_iters: int = 50) -> None:
        """Fold the normalization into the raw weights and switch it off.

        ``power_iters`` refines u first. One iteration per training step lags
        when the top two singular values are close, so without refinement the
        baked weights can keep sigma a few percent above 1.
        """
        if not self.spectral_norm:
            return
        w_ih, w_hh = self.decoder_weights(update_sn=True, power_iters=power_iters)
        for k, w in zip(SN_PARAMS, (w_ih, w_hh)):
            self.store[k].data = np.array(w.data, dtype=self.store[k].data.dtype)
        self.store.reset_moments(SN_PARAMS)
        self.spectral_norm = False

    # ------------------------------------------------------------------
    # encoder

    def encode(self, questions: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        """Bidirectional encoding. Returns states (B, T, 2H) and a (B, T) validity mask."""
        if any(len(q) == 0 for q in questions):
            raise ValueError("empty question")
        if any(max(q) >= self.cfg.q_vocab for q in questions):
            raise ValueError("question token out of vocabulary")
        B = len(questions)
        T = max(len(q) for q in questions)
        ids = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T), dtype=ad.DTYPE)
        for i, q in enumerate(questions):
            ids[i, :len(q)] = q
            mask[i, :len(q)] = 1
        st = self.store
        x = ad.take(st["q_embed"], ids)  # (B, T, E)
        H = self.cfg.enc_hidden
        outs = {}
        for d, order in (("fwd", range(T)), ("bwd", range(T - 1, -1, -1))):
            h = Tensor(np.zeros((B, H), ad.DTYPE))
            c = Tensor(np.zeros((B, H), ad.DTYPE))
            seq: list[Tensor | None] = [None] * T
            for t in order:
                h_new, c_new = ad.lstm_step(x[:, t, :], h, c, st[f"enc.{d}.w_ih"], st[f"enc.{d}.w_hh"],
                                            st[f"enc.{d}.b_ih"], st[f"enc.{d}.b_hh"])
                m = mask[:, t:t + 1]
                h = h_new * m + h * (1 - m)
                c = c_new * m + c * (1 - m)
                seq[t] = ad.reshape(h, (B, 1, H))
            outs[d] = ad.concat(seq, axis=1)
        return ad.concat([outs["fwd"], outs["bwd"]], axis=2), mask

    # ------------------------------------------------------------------
    # decoder

    def _attend(self, h: Tensor, enc: Tensor, keys: Tensor, pad: np.ndarray) -> Tensor:
        B, T, _ = enc.shape
        q = ad.reshape(ad.linear(h, self.store["att.w_query"]), (B, 1, -1))
        s = ad.tanh(keys + q)
        scores = ad.reshape(ad.matmul(s, self.store["att.v"]), (B, T)) + pad
        w = ad.exp(ad.log_softmax(scores, axis=1))
        return ad.sum(ad.reshape(w, (B, T, 1)) * enc, axis=1)

    def step_distribution(self, state, prev: np.ndarray, ctx_cache, weights, token_mask=None):
        """One decoder step. Returns (log-probs (B, V), new state).

        ``token_mask`` is an additive (B, V) array of 0 / -1e9.
        """
        h, c = state
        enc, keys, pad = ctx_cache
        context = self._attend(h, enc, keys, pad)
        emb = ad.take(self.store["p_embed"], np.asarray(prev, dtype=np.int64))
        x = ad.concat([emb, context], axis=1)
        h, c = ad.lstm_step(x, h, c, weights[0], weights[1], self.store["dec.b_ih"], self.store["dec.b_hh"])
        logits = ad.linear(h, self.store["out.w"], self.store["out.b"])
        if token_mask is not None:
            logits = logits + token_mask
        return ad.log_softmax(logits, axis=1), (h, c)

    def _start(self, questions, update_sn: bool):
        enc, mask = self.encode(questions)
        keys = ad.linear(enc, self.store["att.w_key"])
        pad = np.where(mask > 0, 0.0, NEG).astype(ad.DTYPE)
        B = len(questions)
        D = self.cfg.dec_hidden
        state = (Tensor(np.zeros((B, D), ad.DTYPE)), Tensor(np.zeros((B, D), ad.DTYPE)))
        return state, (enc, keys, pad), self.decoder_weights(update_sn=update_sn)

    @staticmethod
    def _mask_for(pending: np.ndarray, lengths: np.ndarray, done: np.ndarray,
                  constrained: bool, max_len: int) -> np.ndarray:
        """Additive (B, V) logit mask; vectorised form of :func:`lang.allowed`."""
        B = len(pending)
        m = np.full((B, lang.VOCAB_SIZE), NEG, dtype=ad.DTYPE)
        ops = np.array(lang.OPERATOR_IDS)
        if constrained:
            arity = np.array([lang.ARITY[t] for t in ops])
            new_p = pending[:, None] - 1 + arity[None, :]
            ok = ((pending > 0) & (lengths < max_len))[:, None] \
                & (new_p >= 0) & (new_p <= (max_len - lengths - 1)[:, None])
            m[:, ops] = np.where(ok, 0.0, NEG)
        else:
            m[:, ops] = 0
            m[:, lang.END] = 0
        m[done] = NEG
        m[done, lang.NULL] = 0
        return m

    def decode(self, questions: Sequence[Sequence[int]], rng: np.random.Generator | None = None,
               greedy: bool = False, constrained: bool = True, max_len: int = lang.MAX_PROGRAM_LEN,
               update_sn: bool = False) -> tuple[list[DecodeOutput], Tensor]:
        """Decode a batch. Returns outputs and the (B,) summed log-prob tensor,
        which carries gradient when a tape is active."""
        if not greedy and rng is None:
            raise ValueError("sampling needs an rng")
        B = len(questions)
        state, cache, weights = self._start(questions, update_sn)
        pending = np.ones(B, dtype=np.int64)
        lengths = np.zeros(B, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        terminated = np.zeros(B, dtype=bool)
        prev = np.full(B, lang.START, dtype=np.int64)
        seqs: list[list[int]] = [[] for _ in range(B)]
        lps: list[list[float]] = [[] for _ in range(B)]
        total: Tensor | None = None
        rows = np.arange(B)
        steps = max_len if constrained else max_len + 1
        for _ in range(steps):
            if done.all():
                break
            tmask = self._mask_for(pending, lengths, done, constrained, max_len)
            logp, state = self.step_distribution(state, prev, cache, weights, tmask)
            lp = logp.data.astype(np.float64)
            if greedy:
                tok = lp.argmax(axis=1)
            else:
                p = np.exp(lp)
                cdf = np.cumsum(p, axis=1)
                cdf /= cdf[:, -1:]
                u = rng.random(B)
                tok = np.minimum((cdf <= u[:, None]).sum(axis=1), lang.VOCAB_SIZE - 1)
            alive = (~done).astype(ad.DTYPE)
            picked = ad.take(logp, (rows, tok)) * alive
            total = picked if total is None else total + picked
            live = ~done
            for b in np.flatnonzero(live):
                lps[b].append(float(lp[b, tok[b]]))
            ended = live & (tok == lang.END)
            terminated |= ended
            # a row at capacity that does not choose <END> is cut off
            cut = live & ~ended & (lengths >= max_len)
            done = done | ended | cut
            emit = live & ~ended & ~cut
            for b in np.flatnonzero(emit):
                seqs[b].append(int(tok[b]))
            ar = _ARITY_TABLE[tok]
            grow = emit & (ar >= 0) & (pending > 0)
            pending = np.where(grow, pending + ar - 1, pending)
            lengths = lengths + emit
            if constrained:
                done = done | (emit & (pending == 0))
            prev = np.where(done, lang.NULL, tok)
        outs = []
        for b in range(B):
            # unconstrained samples must also close themselves with <END>
            valid = lang.validate_prefix(seqs[b]) and (constrained or bool(terminated[b]))
            repaired = not valid
            exec_seq = list(seqs[b]) if valid else lang.repair(seqs[b])
            outs.append(DecodeOutput(seqs[b], lps[b], valid, repaired, exec_seq))
        if total is None:
            total = Tensor(np.zeros(B, ad.DTYPE))
        return outs, total

    def decode_sample(self, questions, rng, constrained: bool = True,
                      max_len: int = lang.MAX_PROGRAM_LEN) -> list[DecodeOutput]:
        return self.decode(questions, rng=rng, constrained=constrained, max_len=max_len)[0]

    def decode_argmax(self, questions, constrained: bool = True,
                      max_len: int = lang.MAX_PROGRAM_LEN) -> list[DecodeOutput]:
        return self.decode(questions, greedy=True, constrained=constrained, max_len=max_len)[0]

    def sequence_logprob(self, questions: Sequence[Sequence[int]], programs: Sequence[Sequence[int]],
                         constrained: bool = True, max_len: int = lang.MAX_PROGRAM_LEN,
                         update_sn: bool = False) -> Tensor:
        """Teacher-forced (B,) log-probabilities of ``programs``."""
        B = len(questions)
        targets = [list(p) + ([] if constrained else [lang.END]) for p in programs]
        T = max(len(t) for t in targets)
        state, cache, weights = self._start(questions, update_sn)
        pending = np.ones(B, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        prev = np.full(B, lang.START, dtype=np.int64)
        rows = np.arange(B)
        total = None
        for step in range(T):
            lengths = np.full(B, step, dtype=np.int64)
            done = np.array([step >= len(t) for t in targets])
            tmask = self._mask_for(pending, lengths, done, constrained, max_len)
            logp, state = self.step_distribution(state, prev, cache, weights, tmask)
            tok = np.array([t[step] if step < len(t) else lang.NULL for t in targets])
            alive = (~done).astype(ad.DTYPE)
            picked = ad.take(logp, (rows, tok)) * alive
            total = picked if total is None else total + picked
            ar = _ARITY_TABLE[tok]
            pending = np.where(~done & (ar >= 0), pending + ar - 1, pending)
            prev = tok
        return total

    # ------------------------------------------------------------------
    # objectives

    def supervised_loss(self, questions, programs, weight: float = 1.0, **kw) -> Tensor:
        """Weighted teacher-forced cross-entropy, summed over steps, averaged over the batch."""
        return ad.mean(self.sequence_logprob(questions, programs, **kw)) * (-weight)

    @staticmethod
    def reinforce_loss(logp_sum: Tensor, losses: np.ndarray, weight: float = 10.0,
                       baseline: float | None = None) -> Tensor:
        """Surrogate whose gradient is weight * mean(-r * grad log p), r = clip(-L, -5, 5)."""
        reward = np.clip(-np.asarray(losses, dtype=np.float64), -5.0, 5.0)
        if baseline is not None:
            reward = reward - baseline
        coef = (-weight * reward / len(reward)).astype(ad.DTYPE)
        return ad.sum(logp_sum * coef)

    def supervised_update(self, questions, programs, weight: float = 1.0, lr: float | None = None,
                          **kw) -> float:
        with Tape() as tape:
            loss = self.supervised_loss(questions, programs, weight, update_sn=self.spectral_norm, **kw)
            tape.backward(loss)
        if lr is not None:
            adam_step(self.store, lr)
        return loss.item()

    def reinforce_update(self, decode_logp: Tensor, losses, weight: float = 10.0, tape: Tape | None = None,
                         baseline: float | None = None) -> Tensor:
        """Accumulate the REINFORCE gradient for log-probs recorded on ``tape``."""
        surrogate = self.reinforce_loss(decode_logp, losses, weight, baseline)
        if tape is not None:
            tape.backward(surrogate)
        return surrogate


def reward(loss: float) -> float:
    return float(np.clip(-loss, -5.0, 5.0))
