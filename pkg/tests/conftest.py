import numpy as np

from fcvae.datagen import DatasetBundle
from fcvae.diffcore import NoiseStream, no_grad
from fcvae.models import Architecture, build_model, decode_t, decode_x, decode_y


def model_family_bundle(seed: int, n: int = 200, d_x: int = 3) -> DatasetBundle:
    """Rows sampled from a random one-dimensional-latent FCVAE-1, with every counterfactual."""
    rng = np.random.default_rng(seed)
    gen = build_model("FCVAE-1", d_x, NoiseStream(seed, "toy-generator"), Architecture(d_z=1))
    gen.set_parameters([w + rng.normal(scale=0.3, size=w.shape) for w in gen.copy_arrays()])
    z = rng.normal(size=(n, 1))
    a = rng.integers(0, 2, n)
    with no_grad():
        x = decode_x(gen, z, a)[0].data + rng.normal(size=(n, d_x))
        pt = np.column_stack([decode_t(gen, z, np.full(n, k)).data.ravel() for k in (0, 1)])
        y_cf = np.empty((n, 2, 2))
        for t in (0, 1):
            for k in (0, 1):
                mean, log_std = decode_y(gen, z, np.full(n, k), t)
                y_cf[:, t, k] = mean.data.ravel() + np.exp(log_std.data.ravel()) * rng.normal(size=n)
    u = rng.random(n)
    t_cf = (u[:, None] < pt).astype(np.int64)
    rows = np.arange(n)
    t = t_cf[rows, a]
    return DatasetBundle(x=x, a=a, z_hidden=z.ravel(), t_factual=t, y_factual=y_cf[rows, t, a],
                         y_cf=y_cf, t_cf=t_cf, feature_names=[f"x{j}" for j in range(d_x)])
