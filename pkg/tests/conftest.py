import numpy as np

from frontflow.deeponet import SurrogateConfig, WeightBundle, expected_shapes


def filled_bundle(cfg: SurrogateConfig, fill) -> WeightBundle:
    """Bundle with every tensor produced by fill(name, shape)."""
    tensors = {}
    for name, shape in expected_shapes(cfg).items():
        arr = np.asarray(fill(name, shape), dtype=np.float32)
        tensors[name] = np.broadcast_to(arr, shape).astype(np.float32).copy()
    return WeightBundle(config=cfg, tensors=tensors)


def seeded_bundle(cfg: SurrogateConfig, seed: int = 0, scale: float = 0.25) -> WeightBundle:
    """Small random weights; batch-norm statistics kept benign."""
    rng = np.random.default_rng(seed)

    def fill(name, shape):
        if "running_var" in name:
            return np.ones(shape)
        if "running_mean" in name:
            return np.zeros(shape)
        if name.endswith("bn1.weight") or name.endswith("bn2.weight"):
            return np.ones(shape)
        if name.endswith("bn1.bias") or name.endswith("bn2.bias"):
            return np.zeros(shape)
        n_in = int(np.prod(shape[1:])) if len(shape) > 1 else max(int(np.prod(shape)), 1)
        return rng.standard_normal(shape) * scale / np.sqrt(n_in)

    return filled_bundle(cfg, fill)
