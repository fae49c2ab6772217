"""Deterministic random substreams.

Every stochastic draw in an experiment comes from a generator keyed by
``(base_seed, tag, image_id, round)``::

    np.random.Generator(np.random.PCG64(np.random.SeedSequence([base_seed, tag, image_id, round])))

where ``tag`` is one of the integer codes below and ``round`` is the attack
iteration or validation trial. Within one stream, replicate noises are drawn
as a single C-ordered array of shape ``(replicates, n_steps, *sample_shape)``,
so replicate ``h`` of an image is stream slice ``h``. Results therefore do not
depend on how images are batched or in which order replicates run.
"""

from typing import Sequence

import numpy as np

ATTACK_EOT = 1
ATTACK_CHECK = 2
VALIDATE = 3
STABILITY = 5
BENCH = 6
TRAIN = 7
ATTACK_INIT = 8


def substream(base_seed: int, tag: int, *index: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(base_seed), int(tag), *[int(i) for i in index]])
    return np.random.Generator(np.random.PCG64(seq))


def replicate_noise(
    base_seed: int,
    tag: int,
    image_ids: Sequence[int],
    round_idx: int,
    replicates: int,
    n_steps: int,
    sample_shape: tuple,
) -> np.ndarray:
    """Noise for ``len(image_ids) * replicates`` purification rows.

    Returns an array of shape ``(n_steps, len(image_ids) * replicates, *sample_shape)``;
    rows are image-major (row ``i * replicates + h``).
    """
    blocks = []
    for img in image_ids:
        g = substream(base_seed, tag, img, round_idx)
        blocks.append(g.standard_normal((replicates, n_steps) + tuple(sample_shape)))
    arr = np.concatenate(blocks, axis=0)
    return np.ascontiguousarray(np.moveaxis(arr, 1, 0))


class ZeroNoise:
    """Generator stand-in whose normal draws are all zero (noise-free oracles)."""

    def standard_normal(self, size=None):
        return np.zeros(size if size is not None else ())


def draw(rng, n_steps: int, shape: tuple) -> np.ndarray:
    return np.asarray(rng.standard_normal((n_steps,) + tuple(shape)), dtype=np.float64)
