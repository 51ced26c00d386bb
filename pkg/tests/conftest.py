import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import random_integrals  # noqa: E402

from sqd import MolecularIntegrals, SystemSpec, write_fcidump  # noqa: E402

# Szabo-Ostlund style H2/STO-3G integrals at R = 1.4 bohr (chemists' notation).
H2_FCIDUMP = """&FCI NORB=2,NELEC=2,MS2=0,
&END
0.67459 1 1 1 1
0.66371 1 1 2 2
0.18129 1 2 1 2
0.69745 2 2 2 2
-1.25285 1 1 0 0
-0.47585 2 2 0 0
0.71428571428571430 0 0 0 0
"""


def chain_model(n_orb, hopping=-0.4, spread=0.8, u=1.2, core=1.5) -> MolecularIntegrals:
    """Correlated 1D-chain model with aufbau-structured occupancies.

    Ascending orbital energies with nearest-neighbor hopping; the Coulomb
    tensor decays with both the orbital-pair width and the distance between
    pair centers, which keeps the full 8-fold symmetry.
    """
    p = np.arange(n_orb)
    h = np.diag(-2.0 + spread * p).astype(float)
    for i in range(n_orb - 1):
        h[i, i + 1] = h[i + 1, i] = hopping
    width = np.exp(-0.5 * (p[:, None] - p[None, :]) ** 2)
    centers = (p[:, None] + p[None, :]) / 2.0
    falloff = u / (1.0 + np.abs(centers[:, :, None, None] - centers[None, None, :, :]))
    eri = width[:, :, None, None] * width[None, None, :, :] * falloff
    return MolecularIntegrals(n_orb, core, h, eri)


@pytest.fixture(scope="session")
def h2_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("fcidump") / "h2.fcidump"
    path.write_text(H2_FCIDUMP)
    return path


@pytest.fixture(scope="session")
def small_systems(tmp_path_factory):
    """Three random-integral FCIDUMPs with dimensions 36, 400 and 4900."""
    root = tmp_path_factory.mktemp("systems")
    systems = []
    for n_orb, n_e, seed in ((4, 2, 11), (6, 3, 12), (8, 4, 13)):
        spec = SystemSpec(n_orb, n_e, n_e)
        ints = random_integrals(n_orb, seed=seed, scale=0.5)
        path = root / f"rand{n_orb}.fcidump"
        write_fcidump(path, ints, spec)
        systems.append((path, ints, spec))
    return systems


@pytest.fixture(scope="session")
def six_orbital_system(tmp_path_factory):
    """The 6-orbital chain molecule used by the recovery and loop tests."""
    spec = SystemSpec(6, 3, 3)
    ints = chain_model(6)
    path = tmp_path_factory.mktemp("chain") / "chain6.fcidump"
    write_fcidump(path, ints, spec)
    return path, ints, spec
