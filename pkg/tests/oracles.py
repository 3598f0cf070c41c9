"""Independent reference computations used by the tests."""
import itertools

import numpy as np

FD_STEP = 1e-4
KINK_MARGIN = 1e-2


def numeric_grad(loss_fn, params, h=FD_STEP):
    """Central finite differences of ``loss_fn()`` w.r.t. every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    """max |a - n| relative to the larger of the two gradients' max magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def brute_force_viterbi(posteriors, log_prior, log_trans, prior_floor=1e-8):
    """Best path by enumerating all U**I state sequences (lowest id wins ties)."""
    n_frames, n_states = posteriors.shape
    emit = np.log(posteriors) - np.maximum(log_prior, np.log(prior_floor))
    best_path, best = None, -np.inf
    for path in itertools.product(range(n_states), repeat=n_frames):
        s = sum(emit[i, u] for i, u in enumerate(path))
        s += sum(log_trans[a, b] for a, b in zip(path[:-1], path[1:]))
        if s > best:
            best, best_path = s, path
    return np.array(best_path), best


def random_hmm_instance(rng, n_states, n_frames):
    post = rng.dirichlet(np.ones(n_states), size=n_frames)
    prior = rng.dirichlet(np.ones(n_states))
    trans = rng.dirichlet(np.ones(n_states), size=n_states)
    return post, np.log(prior), np.log(trans)


def away_from_kinks(net, rng, shape):
    """Draw inputs whose hidden pre-activations all clear the ReLU kink.

    Central differences straddling a kink do not estimate the derivative, so
    such draws are rejected rather than loosening the tolerance.
    """
    while True:
        x = rng.normal(size=shape)
        _, cache = net.forward(x, train=True)
        if min(np.min(np.abs(c[1])) for c in cache[:-1]) > KINK_MARGIN:
            return x
