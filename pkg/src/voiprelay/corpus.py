"""Tiny synthetic corpora for demos and tests.

The package ships a pre-generated copy under ``data/corpus``; the same
files can be regenerated with :func:`write_demo_corpus`.
"""

import os
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, write_wav

CORPUS_ROOT_ENV = "CORPUS_ROOT"
BUNDLED_CORPUS = Path(__file__).parent / "data" / "corpus"

# label -> (noisy?, rate, channels)
_SETS = {
    "test_clean": (False, 16000, 1),
    "test_src_noisy": (True, 16000, 1),
    "src_clean": (False, 16000, 1),
    "src_noisy": (True, 16000, 1),
}
_FILES = ("utt_000.wav", "utt_001.wav", "utt_002.wav")


def default_corpus_root():
    return Path(os.environ.get(CORPUS_ROOT_ENV, BUNDLED_CORPUS))


def voiced_clip(seed, seconds=0.5, rate=16000, noise=0.0):
    """Harmonic tone with a syllable-like envelope, optionally with white noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * rate)) / rate
    f0 = 110.0 + 40.0 * rng.random()
    x = sum(np.sin(2 * np.pi * f0 * k * t + rng.random() * 6.28) / k for k in range(1, 6))
    env = 0.5 * (1 - np.cos(2 * np.pi * 3.0 * t))
    x = 0.3 * x * env
    if noise:
        x = x + noise * rng.standard_normal(t.size)
    return np.clip(np.round(x * 32767 / 2), -32768, 32767).astype(np.int16)


def write_demo_corpus(root, seconds=0.5):
    """Write the four demo sets; clean/noisy sets share utterances pairwise."""
    root = Path(root)
    written = []
    for label, (noisy, rate, channels) in _SETS.items():
        d = root / label
        d.mkdir(parents=True, exist_ok=True)
        for i, name in enumerate(_FILES):
            x = voiced_clip(i, seconds, rate, noise=0.05 if noisy else 0.0)
            if channels > 1:
                x = np.repeat(x, channels)
            write_wav(AudioClip(x, rate, channels), d / name)
            written.append(d / name)
    return written
