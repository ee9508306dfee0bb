"""Independent reference implementations shared by the unit and acceptance tests."""
import functools
import itertools
import math

import numpy as np

from userlibri.acoustic import PosteriorLattice
from userlibri.decoder import smoothed_ilm_log
from userlibri.wordpiece import BLANK_ID


def brute_overlaps(sentence, transcripts):
    """Direct scan: every run of the threshold length against every transcript position."""
    toks = sentence.split()
    n = len(toks)
    if n == 0:
        return False
    k = max(1, math.ceil(0.8 * n - 1e-9))
    for i in range(n - k + 1):
        run = toks[i : i + k]
        for t in transcripts:
            for j in range(len(t) - k + 1):
                if list(t[j : j + k]) == run:
                    return True
    return False


def random_lattice(rng, frames, V, sparsity=0.3):
    dense = rng.dirichlet(np.ones(V), size=frames)
    dense[rng.random(dense.shape) < sparsity] = 0.0
    dense[:, 0] += 1e-3  # keep blank alive so no frame is empty
    dense /= dense.sum(axis=1, keepdims=True)
    prior = rng.dirichlet(np.ones(V - 1))
    return PosteriorLattice.from_dense(dense, np.concatenate(([0.0], prior)))


def exhaustive_best(lattice, config, ext_lm=None):
    """Enumerate every per-frame choice; merge equal label sequences by max."""
    V = lattice.vocab_size
    dense = lattice.dense()
    log_ilm = smoothed_ilm_log(lattice.prior, config.ilm_temperature) if config.ilm_weight > 0 else None
    best = {}
    for path in itertools.product(range(V), repeat=len(dense)):
        score, tokens, ok = 0.0, (), True
        for t, c in enumerate(path):
            if dense[t, c] == 0:
                ok = False
                break
            step = math.log(dense[t, c])
            if c != BLANK_ID:
                if ext_lm is not None:
                    step += config.ext_weight * math.log(ext_lm.dist(tokens)[c])
                if log_ilm is not None:
                    step -= config.ilm_weight * log_ilm[c]
                tokens += (c,)
            score += step
        if not ok:
            continue
        if ext_lm is not None:
            score += config.ext_weight * math.log(ext_lm.dist(tokens)[ext_lm.eos])
        best[tokens] = max(best.get(tokens, -math.inf), score)
    return min(best.items(), key=lambda kv: (-kv[1], kv[0]))


def edit_distance_oracle(ref, hyp):
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), d(i - 1, j) + 1, d(i, j - 1) + 1)
    return d(len(ref), len(hyp))


def percentile_oracle(sorted_vals, q):
    # linear interpolation between closest ranks
    pos = (len(sorted_vals) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(sorted_vals) - 1)
    return sorted_vals[lo] + (sorted_vals[hi] - sorted_vals[lo]) * (pos - lo)


def bootstrap_oracle(values, resamples, seed, level=0.95):
    draws = np.random.default_rng(seed).integers(0, len(values), size=(resamples, len(values)))
    means = sorted(sum(values[i] for i in row) / len(values) for row in draws.tolist())
    tail = (1 - level) / 2 * 100
    return percentile_oracle(means, tail), percentile_oracle(means, 100 - tail)
