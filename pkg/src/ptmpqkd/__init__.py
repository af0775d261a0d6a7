"""Secret key rates of point-to-multipoint CV-QKD over passive optical networks."""

from .errors import ContractViolation, DomainError, InsufficientBalance, NumericalError
from .gaussian import (
    ALICE,
    REST,
    CovMatrix,
    ModeLabel,
    Role,
    SymplecticOp,
    bob,
    heterodyne_condition,
    is_physical,
    symplectic_eigenvalues,
    von_neumann_entropy,
)
from .keyrate import (
    KeyRateBreakdown,
    ProtocolParams,
    holevo_bound,
    key_rate,
    network_key_rates,
    template_key_rate,
    worst_case_over_ratio,
)
from .ledger import KeyLedger, ledger_round, simulate_ledger
from .network import (
    ChannelParams,
    DetectorModel,
    NetworkTopology,
    NoiseBudget,
    PONTemplate,
    Segment,
    build_network_cov,
)
from .reduction import closed_form_three_mode, equivalent_one_way, reduce_to_three_modes

__version__ = "0.1.0"
