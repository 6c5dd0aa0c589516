"""Preference data: sampling, label noise, and JSON-lines persistence.

Records are generated from per-record counter-based substreams (see
:mod:`robustpref.rng`), so record ``i`` of a dataset depends only on
``(env, seed, i)``.  A dataset of ``n`` records is a prefix of the dataset
of ``m > n`` records with the same seed.

Training code never sees the diagnostic fields (clean labels, flip flags):
it consumes :class:`ObservedPairs` / :class:`ObservedRankings`, obtained via
:meth:`PreferenceDataset.observed`.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import rng
from .env import DiscreteEnv, true_pref_table
from .errors import (
    DegenerateSFTError,
    InvalidRateError,
    KindMismatchError,
    MalformedRankingError,
    ProvenanceError,
)

MAX_PAIR_ATTEMPTS = 64


@dataclass(frozen=True)
class ObservedPair:
    prompt: int
    winner: int
    loser: int


@dataclass(frozen=True)
class PreferencePair:
    prompt: int
    obs_winner: int
    obs_loser: int
    clean_winner: int
    flipped: bool

    @property
    def clean_loser(self) -> int:
        return self.obs_loser if self.clean_winner == self.obs_winner else self.obs_winner

    def observed(self) -> ObservedPair:
        return ObservedPair(self.prompt, self.obs_winner, self.obs_loser)


@dataclass(frozen=True)
class ObservedRanking:
    prompt: int
    ranking: tuple


@dataclass(frozen=True)
class RankingSample:
    prompt: int
    obs_ranking: tuple
    clean_ranking: tuple
    candidate_count: int

    def observed(self) -> ObservedRanking:
        return ObservedRanking(self.prompt, self.obs_ranking)


@dataclass(frozen=True, eq=False)
class ObservedPairs:
    """Redacted batch of pairs: prompt, observed winner, observed loser."""

    s: np.ndarray
    w: np.ndarray
    l: np.ndarray

    def __len__(self):
        return len(self.s)

    def __getitem__(self, i) -> ObservedPair:
        return ObservedPair(int(self.s[i]), int(self.w[i]), int(self.l[i]))


@dataclass(frozen=True, eq=False)
class ObservedRankings:
    s: np.ndarray
    rank: np.ndarray

    def __len__(self):
        return len(self.s)

    def __getitem__(self, i) -> ObservedRanking:
        return ObservedRanking(int(self.s[i]), tuple(int(a) for a in self.rank[i]))


def _ro(x, dtype):
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


class PreferenceDataset:
    """Immutable pairwise or ranking dataset with hidden diagnostics.

    Pairwise datasets hold arrays ``s, w, l, cw, flip``; ranking datasets hold
    ``s, rank, crank`` with ``rank`` and ``crank`` of shape ``(n, K)``.
    """

    def __init__(self, kind: str, env_hash: str, seed: int, eps_true: float, **arrays):
        if kind not in ("pair", "rank"):
            raise KindMismatchError(f"unknown dataset kind {kind!r}")
        if not (0.0 <= eps_true < 0.5) and kind == "pair":
            raise InvalidRateError(f"eps_true must lie in [0, 0.5), got {eps_true}")
        self.kind = kind
        self.env_hash = env_hash
        self.seed = int(seed)
        self.eps_true = float(eps_true)
        if kind == "pair":
            self.s = _ro(arrays["s"], np.int64)
            self.w = _ro(arrays["w"], np.int64)
            self.l = _ro(arrays["l"], np.int64)
            self.cw = _ro(arrays["cw"], np.int64)
            self.flip = _ro(arrays["flip"], bool)
            if np.any(self.w == self.l):
                raise ValueError("observed winner equals observed loser")
            if np.any(self.flip != (self.w != self.cw)):
                raise ValueError("flip flags disagree with clean winners")
            if np.any((self.cw != self.w) & (self.cw != self.l)):
                raise ValueError("clean winner is not one of the observed actions")
        else:
            self.s = _ro(arrays["s"], np.int64)
            self.rank = _ro(arrays["rank"], np.int64)
            self.crank = _ro(arrays["crank"], np.int64)
            if self.rank.ndim != 2 or self.rank.shape != self.crank.shape:
                raise MalformedRankingError("rank and crank must be (n, K) arrays")
            _check_rankings(self.rank)
            if not np.array_equal(np.sort(self.rank, axis=1), np.sort(self.crank, axis=1)):
                raise MalformedRankingError("observed and clean rankings differ in support")

    def __len__(self):
        return len(self.s)

    def __eq__(self, other):
        if not isinstance(other, PreferenceDataset):
            return NotImplemented
        head = (self.kind, self.env_hash, self.seed, self.eps_true)
        if head != (other.kind, other.env_hash, other.seed, other.eps_true):
            return False
        names = ("s", "w", "l", "cw", "flip") if self.kind == "pair" else ("s", "rank", "crank")
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in names)

    def __repr__(self):
        return (f"PreferenceDataset(kind={self.kind!r}, n={len(self)}, "
                f"eps_true={self.eps_true}, seed={self.seed})")

    @property
    def K(self) -> int:
        return 2 if self.kind == "pair" else self.rank.shape[1]

    @property
    def candidate_count(self) -> int:
        return math.factorial(self.K)

    @property
    def cl(self) -> np.ndarray:
        """Clean losers."""
        self._need("pair")
        return np.where(self.cw == self.w, self.l, self.w)

    def _need(self, kind):
        if self.kind != kind:
            raise KindMismatchError(f"operation needs a {kind!r} dataset, got {self.kind!r}")

    def observed(self):
        """Redacted view for training: no clean labels, no flip flags."""
        if self.kind == "pair":
            return ObservedPairs(self.s, self.w, self.l)
        return ObservedRankings(self.s, self.rank)

    def clean(self):
        """Redacted view carrying the clean labels instead of the observed ones."""
        if self.kind == "pair":
            return ObservedPairs(self.s, self.cw, self.cl)
        return ObservedRankings(self.s, self.crank)

    def records(self) -> Iterator:
        if self.kind == "pair":
            for i in range(len(self)):
                yield PreferencePair(int(self.s[i]), int(self.w[i]), int(self.l[i]),
                                     int(self.cw[i]), bool(self.flip[i]))
        else:
            N = self.candidate_count
            for i in range(len(self)):
                yield RankingSample(int(self.s[i]), tuple(map(int, self.rank[i])),
                                    tuple(map(int, self.crank[i])), N)

    def head(self, n: int) -> "PreferenceDataset":
        """The first ``n`` records (the same-seed dataset of size ``n``)."""
        if self.kind == "pair":
            return PreferenceDataset("pair", self.env_hash, self.seed, self.eps_true,
                                     s=self.s[:n], w=self.w[:n], l=self.l[:n],
                                     cw=self.cw[:n], flip=self.flip[:n])
        return PreferenceDataset("rank", self.env_hash, self.seed, self.eps_true,
                                 s=self.s[:n], rank=self.rank[:n], crank=self.crank[:n])

    def check_env(self, env: DiscreteEnv) -> None:
        """Raise :class:`ProvenanceError` unless the dataset belongs to ``env``."""
        if self.env_hash != env.fingerprint():
            raise ProvenanceError("dataset was generated from a different environment")
        if len(self) and (self.s.max() >= env.n_prompts or self.s.min() < 0):
            raise ProvenanceError("prompt index out of range for environment")
        acts = (self.w, self.l) if self.kind == "pair" else (self.rank,)
        for arr in acts:
            if arr.size and (arr.max() >= env.n_actions or arr.min() < 0):
                raise ProvenanceError("action index out of range for environment")

    # -- persistence ---------------------------------------------------------

    def to_jsonl(self, path) -> None:
        header = {"env_hash": self.env_hash, "seed": self.seed,
                  "eps_true": self.eps_true, "kind": self.kind}
        lines = [json.dumps(header)]
        if self.kind == "pair":
            for rec in zip(self.s.tolist(), self.w.tolist(), self.l.tolist(),
                           self.cw.tolist(), self.flip.tolist()):
                lines.append(json.dumps(dict(zip(("s", "w", "l", "cw", "flip"), rec))))
        else:
            for s, r, c in zip(self.s.tolist(), self.rank.tolist(), self.crank.tolist()):
                lines.append(json.dumps({"s": s, "rank": r, "crank": c}))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_jsonl(cls, path) -> "PreferenceDataset":
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        if not rows:
            raise ValueError(f"{path}: empty dataset file")
        head, body = rows[0], rows[1:]
        kind = head.get("kind")
        common = dict(env_hash=head["env_hash"], seed=head["seed"], eps_true=head["eps_true"])
        if kind == "pair":
            cols = {k: [r[k] for r in body] for k in ("s", "w", "l", "cw", "flip")}
            return cls("pair", **common, **cols)
        if kind == "rank":
            K = len(body[0]["rank"]) if body else 2
            return cls("rank", **common, s=[r["s"] for r in body],
                       rank=np.array([r["rank"] for r in body], dtype=np.int64).reshape(-1, K),
                       crank=np.array([r["crank"] for r in body], dtype=np.int64).reshape(-1, K))
        raise KindMismatchError(f"{path}: unknown dataset kind {kind!r}")


def save_dataset(ds: PreferenceDataset, path) -> None:
    ds.to_jsonl(path)


def load_dataset(path, env: Optional[DiscreteEnv] = None) -> PreferenceDataset:
    ds = PreferenceDataset.from_jsonl(path)
    if env is not None:
        ds.check_env(env)
    return ds


def _check_rankings(rank: np.ndarray) -> None:
    if rank.shape[1] < 2:
        raise MalformedRankingError("rankings need at least two actions")
    srt = np.sort(rank, axis=1)
    if np.any(srt[:, 1:] == srt[:, :-1]):
        raise MalformedRankingError("ranking repeats an action")


def _check_sft(env: DiscreteEnv) -> None:
    pi = env.sft_policy
    distinct = 1.0 - (pi ** 2).sum(axis=1)
    bad = np.flatnonzero((env.prompt_weights > 0) & (distinct < 1e-12))
    if bad.size:
        raise DegenerateSFTError(
            f"SFT policy is a point mass at prompt {int(bad[0])}; no distinct pair exists")


# -- pairs ---------------------------------------------------------------------

def sample_pairs(env: DiscreteEnv, n: int, seed: int,
                 min_reward_gap: Optional[float] = None) -> PreferenceDataset:
    """Draw ``n`` clean labelled pairs.

    ``s ~ rho``; two independent draws from ``pi_sft(.|s)`` redrawn (up to 64
    times) until distinct; the first draw wins with probability ``p*``.
    With ``min_reward_gap`` set, pairs whose reward gap does not exceed it
    are redrawn as well.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_sft(env)
    keys = rng.record_keys(seed, "pairs", np.arange(n))
    S = env.n_prompts
    s = rng.categorical(rng.uniforms(keys, 0), np.broadcast_to(env.prompt_weights, (n, S)))
    pi = env.sft_policy
    r = env.latent_reward
    a = np.full(n, -1)
    b = np.full(n, -1)
    pending = np.arange(n)
    for attempt in range(MAX_PAIR_ATTEMPTS):
        sp = s[pending]
        da = rng.categorical(rng.uniforms(keys[pending], 2 + 2 * attempt), pi[sp])
        db = rng.categorical(rng.uniforms(keys[pending], 3 + 2 * attempt), pi[sp])
        ok = da != db
        if min_reward_gap is not None:
            ok &= np.abs(r[sp, da] - r[sp, db]) > min_reward_gap
        a[pending[ok]] = da[ok]
        b[pending[ok]] = db[ok]
        pending = pending[~ok]
        if pending.size == 0:
            break
    if pending.size:
        raise DegenerateSFTError(
            f"could not draw a distinct pair for record {int(pending[0])} "
            f"in {MAX_PAIR_ATTEMPTS} attempts")
    p_star = true_pref_table(env)[s, a, b]
    first_wins = rng.uniforms(keys, 1) < p_star
    w = np.where(first_wins, a, b)
    l = np.where(first_wins, b, a)
    return PreferenceDataset("pair", env.fingerprint(), seed, 0.0,
                             s=s, w=w, l=l, cw=w, flip=np.zeros(n, bool))


def check_flip_rate(eps: float) -> float:
    eps = float(eps)
    if not (0.0 <= eps < 0.5):
        raise InvalidRateError(f"flip rate must lie in [0, 0.5), got {eps}")
    return eps


def flip_pairs(ds: PreferenceDataset, eps: float, seed: int) -> PreferenceDataset:
    """Swap the observed labels of each record independently with probability ``eps``."""
    ds._need("pair")
    eps = check_flip_rate(eps)
    keys = rng.record_keys(seed, "flips", np.arange(len(ds)))
    f = rng.uniforms(keys, 0) < eps
    w = np.where(f, ds.l, ds.w)
    l = np.where(f, ds.w, ds.l)
    # composing two independent flips with rates e1, e2 flips with rate
    # e1 (1 - e2) + e2 (1 - e1)
    e0 = ds.eps_true
    rate = e0 * (1 - eps) + eps * (1 - e0)
    return PreferenceDataset("pair", ds.env_hash, ds.seed, rate,
                             s=ds.s, w=w, l=l, cw=ds.cw, flip=ds.flip ^ f)


# -- rankings ------------------------------------------------------------------

def _subset_table(env: DiscreteEnv, K: int):
    subsets = np.array(list(itertools.combinations(range(env.n_actions), K)), dtype=np.int64)
    # distinct iid draws: P(set) proportional to prod pi_sft over the set
    weights = np.prod(env.sft_policy[:, subsets], axis=2)
    return subsets, weights


def sample_rankings(env: DiscreteEnv, n: int, K: int, seed: int) -> PreferenceDataset:
    """Draw ``n`` clean rankings of ``K`` distinct actions.

    The candidate set has the law of ``K`` independent SFT draws conditioned
    on being distinct; the ranking over it follows Plackett-Luce with scores
    ``r*(s, a)``.  For ``K = 2`` this is the law of :func:`sample_pairs`
    under the BTL model.
    """
    if not (2 <= K <= 5):
        raise ValueError("K must lie in [2, 5]")
    if K > env.n_actions:
        raise ValueError(f"K={K} exceeds the {env.n_actions} available actions")
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_sft(env)
    keys = rng.record_keys(seed, "rankings", np.arange(n))
    S = env.n_prompts
    s = rng.categorical(rng.uniforms(keys, 0), np.broadcast_to(env.prompt_weights, (n, S)))
    subsets, weights = _subset_table(env, K)
    chosen = subsets[rng.categorical(rng.uniforms(keys, 1), weights[s])]

    remaining = chosen.copy()
    ranking = np.empty((n, K), dtype=np.int64)
    rows = np.arange(n)
    for j in range(K):
        m = K - j
        if m == 1:
            ranking[:, j] = remaining[:, 0]
            break
        scores = env.latent_reward[s[:, None], remaining]
        p = np.exp(scores - scores.max(axis=1, keepdims=True))
        pick = rng.categorical(rng.uniforms(keys, 2 + j), p)
        ranking[:, j] = remaining[rows, pick]
        keep = np.ones((n, m), bool)
        keep[rows, pick] = False
        remaining = remaining[keep].reshape(n, m - 1)
    return PreferenceDataset("rank", env.fingerprint(), seed, 0.0,
                             s=s, rank=ranking, crank=ranking)


def check_ranking_rate(eps: float, N: int) -> float:
    eps = float(eps)
    if eps < 0 or (1 - eps) * N - 1 <= 0:
        raise InvalidRateError(
            f"ranking perturbation rate must satisfy 0 <= eps < (N-1)/N with N={N}; got {eps}")
    return eps


def perturb_rankings(ds: PreferenceDataset, eps: float, seed: int) -> PreferenceDataset:
    """Replace each ranking by each of the other ``N - 1`` with probability ``eps/(N-1)``."""
    ds._need("rank")
    K = ds.K
    N = math.factorial(K)
    eps = check_ranking_rate(eps, N)
    others = np.array(list(itertools.permutations(range(K)))[1:], dtype=np.int64)
    keys = rng.record_keys(seed, "perturb", np.arange(len(ds)))
    hit = rng.uniforms(keys, 0) < eps
    which = np.minimum((rng.uniforms(keys, 1) * (N - 1)).astype(np.int64), N - 2)
    rows = np.arange(len(ds))
    moved = ds.rank[rows[:, None], others[which]]
    rank = np.where(hit[:, None], moved, ds.rank)
    return PreferenceDataset("rank", ds.env_hash, ds.seed, eps,
                             s=ds.s, rank=rank, crank=ds.crank)


def all_rankings(ranking: Sequence[int]) -> list:
    """All orderings of the actions in ``ranking`` (the ``N = K!`` candidates)."""
    return [tuple(p) for p in itertools.permutations(ranking)]
