"""Sample-based quantum diagonalization workflow at desk scale."""

__version__ = "0.1.0"

from .chem import (
    CapacityError,
    Configuration,
    ContractViolation,
    FcidumpError,
    MolecularIntegrals,
    SystemSpec,
    hf_configuration,
    hilbert_dimension,
    parse_fcidump,
    rank_half,
    unrank_half,
    write_fcidump,
)
from .hamiltonian import (
    CIVector,
    SubspaceBasis,
    apply_hamiltonian,
    build_excitation_tables,
    build_hamiltonian_tables,
    diagonal_elements,
    energy_variance,
    slater_condon_element,
)

__all__ = [
    "CapacityError",
    "Configuration",
    "ContractViolation",
    "FcidumpError",
    "MolecularIntegrals",
    "SystemSpec",
    "hf_configuration",
    "hilbert_dimension",
    "parse_fcidump",
    "rank_half",
    "unrank_half",
    "write_fcidump",
    "CIVector",
    "SubspaceBasis",
    "apply_hamiltonian",
    "build_excitation_tables",
    "build_hamiltonian_tables",
    "diagonal_elements",
    "energy_variance",
    "slater_condon_element",
]
