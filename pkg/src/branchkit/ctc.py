"""Connectionist temporal classification: loss, greedy decoding, oracle.

Blank is always index 0; real tokens are ``1..V``.
"""

from __future__ import annotations

import dataclasses
import itertools
from typing import Sequence

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import autodiff as ad
from .autodiff import Tensor
from .nn import LinearParams, init_linear, linear

BLANK = 0


class AdmissibilityError(ValueError):
    """A label sequence cannot be aligned to the available frames."""


@dataclasses.dataclass
class CtcHead:
    proj: LinearParams  # d -> V+1

    @property
    def vocab_size(self) -> int:
        return self.proj.d_out - 1


def init_ctc_head(rng, d: int, vocab_size: int, dtype=np.float64) -> CtcHead:
    return CtcHead(init_linear(rng, d, vocab_size + 1, dtype=dtype))


def ctc_log_probs(enc_out, head: CtcHead) -> Tensor:
    return ad.log_softmax(linear(enc_out, head.proj), axis=-1)


def min_frames(labels: Sequence[int]) -> int:
    """Fewest frames that can emit ``labels``: one per token plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _as_label_lists(labels, label_lengths) -> list[list[int]]:
    if label_lengths is None:
        return [list(map(int, seq)) for seq in labels]
    arr = np.asarray(labels)
    return [list(map(int, arr[b, : int(n)])) for b, n in enumerate(label_lengths)]


def ctc_loss(log_probs, labels, in_lengths=None, label_lengths=None) -> Tensor:
    """Mean negative log-likelihood over the batch.

    ``log_probs`` is ``[batch, T, V+1]`` and already log-softmax normalised.
    ``labels`` is either a list of token lists or a padded ``[batch, L]``
    array accompanied by ``label_lengths``.
    """
    log_probs = ad.as_tensor(log_probs)
    B, T, _ = log_probs.shape
    seqs = _as_label_lists(labels, label_lengths)
    if len(seqs) != B:
        raise ValueError(f"{len(seqs)} label sequences for a batch of {B}")
    in_lengths = np.full(B, T) if in_lengths is None else np.asarray(in_lengths, dtype=int)
    for b, seq in enumerate(seqs):
        if any(tok == BLANK for tok in seq):
            raise ValueError("labels must not contain the blank token")
        if min_frames(seq) > in_lengths[b]:
            raise AdmissibilityError(
                f"item {b}: {len(seq)} labels need {min_frames(seq)} frames, only {in_lengths[b]} available"
            )

    L = max((len(s) for s in seqs), default=0)
    S = 2 * L + 1
    ext = np.zeros((B, S), dtype=int)
    for b, seq in enumerate(seqs):
        ext[b, 1 : 2 * len(seq) : 2] = seq
    ext_len = np.array([2 * len(s) + 1 for s in seqs])
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])

    emit = ad.take_along_axis(log_probs, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=-1)
    neg_inf = np.full((B, S), -np.inf, dtype=log_probs.dtype)
    start = np.zeros((B, S), dtype=bool)
    start[:, 0] = True
    if S > 1:
        start[:, 1] = ext_len > 1
    alpha = ad.where(start, emit[:, 0, :], neg_inf)

    pad1 = ad.Tensor(np.full((B, 1), -np.inf, dtype=log_probs.dtype))
    pad2 = ad.Tensor(np.full((B, 2), -np.inf, dtype=log_probs.dtype))
    for t in range(1, T):
        stay = alpha
        step = ad.concat([pad1, alpha[:, :-1]], axis=-1) if S > 1 else pad1
        jump = ad.concat([pad2, alpha[:, :-2]], axis=-1) if S > 2 else None
        cands = [stay, step] if jump is None else [stay, step, ad.where(skip, jump, neg_inf)]
        nxt = ad.logsumexp(ad.stack(cands, axis=-1), axis=-1) + emit[:, t, :]
        alive = (t < in_lengths)[:, None]
        alpha = ad.where(np.broadcast_to(alive, (B, S)), nxt, alpha)

    last = np.stack([ext_len - 1, np.maximum(ext_len - 2, 0)], axis=1)
    ends = ad.take_along_axis(alpha, last, axis=-1)
    has_label = np.stack([np.ones(B, bool), ext_len > 1], axis=1)
    ends = ad.where(has_label, ends, np.full((B, 2), -np.inf, dtype=log_probs.dtype))
    loglik = ad.logsumexp(ends, axis=-1)
    return ad.scale(ad.reduce_mean(loglik), -1.0)


def ctc_brute_force(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """Negative log-likelihood by enumerating every frame labelling.

    ``log_probs`` is ``[T, V+1]`` for a single utterance; limited to T <= 8
    and V <= 4 so the ``(V+1)**T`` paths fit in memory.
    """
    log_probs = np.asarray(ad.as_tensor(log_probs).data, dtype=np.float64)
    T, width = log_probs.shape
    if T > 8 or width - 1 > 4:
        raise ValueError(f"enumeration bound exceeded: T={T}, V={width - 1}")
    labels = list(labels)
    if min_frames(labels) > T:
        raise AdmissibilityError(f"{len(labels)} labels cannot be emitted in {T} frames")
    paths = np.array(list(itertools.product(range(width), repeat=T)), dtype=int).reshape(-1, T)
    prev = np.concatenate([np.full((paths.shape[0], 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != prev) & (paths != BLANK)
    count = keep.sum(axis=1)
    pos = np.clip(np.cumsum(keep, axis=1) - 1, 0, max(len(labels) - 1, 0))
    target = np.array(labels if labels else [-1])
    match = np.where(keep, paths == target[pos], True).all(axis=1) & (count == len(labels))
    path_logp = log_probs[np.arange(T)[None, :], paths].sum(axis=1)
    return float(-np_logsumexp(path_logp[match]))


def ctc_greedy_decode(log_probs, lengths=None) -> list[list[int]]:
    """Framewise argmax, collapse repeats, drop blanks."""
    arr = ad.as_tensor(log_probs).data
    if arr.ndim == 2:
        arr = arr[None]
    B, T, _ = arr.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    best = arr.argmax(axis=-1)
    out = []
    for b in range(B):
        seq, prev = [], None
        for tok in best[b, : int(lengths[b])]:
            tok = int(tok)
            if tok != prev and tok != BLANK:
                seq.append(tok)
            prev = tok
        out.append(seq)
    return out


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> int:
    row = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        diag, row[0] = row[0], i
        for j, h in enumerate(hyp, 1):
            diag, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, diag + (r != h))
    return row[-1]


def token_error_rate(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    errors = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    total = sum(len(r) for r in refs)
    return errors / max(total, 1)


def format_decoded(seqs: Sequence[Sequence[int]], vocab: Sequence[str] | None = None) -> str:
    """One line per utterance: space-separated ids, or symbols when ``vocab`` is given."""
    lines = []
    for seq in seqs:
        lines.append(" ".join(vocab[t] if vocab is not None else str(t) for t in seq))
    return "\n".join(lines) + ("\n" if lines else "")
