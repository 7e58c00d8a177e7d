import numpy as np
import pytest

_WORDS = [
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "stone",
    "river", "wind", "light", "dark", "tree", "bird", "song", "cloud", "rain",
    "fire", "cold", "summer", "winter", "road", "home", "night", "day",
    "moon", "star", "sea", "hill",
]


def synthetic_text(n_chars: int, seed: int = 0) -> str:
    """Low-entropy pseudo-prose: Zipf-weighted word soup in short sentences.

    Deterministic for a fixed seed, structured enough that a byte-level
    model learns quickly.
    """
    rng = np.random.default_rng(seed)
    weights = 1.0 / np.arange(1, len(_WORDS) + 1)
    weights /= weights.sum()
    parts = []
    total = 0
    while total < n_chars:
        count = int(rng.integers(3, 8))
        sentence = " ".join(rng.choice(_WORDS, size=count, p=weights))
        parts.append(sentence + ". ")
        total += len(sentence) + 2
    return "".join(parts)


@pytest.fixture(scope="session")
def corpus_text():
    return synthetic_text(300_000, seed=11)


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory, corpus_text):
    path = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    path.write_text(corpus_text, encoding="utf-8")
    return path


def max_rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.abs(a), np.abs(b))
    mask = denom > 1e-8
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(a - b)[mask] / denom[mask]))


def fd_gradient(loss_fn, arr, h=1e-3):
    """Central finite differences of loss_fn with respect to arr, in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_fn()
        flat[i] = keep - h
        down = loss_fn()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad
