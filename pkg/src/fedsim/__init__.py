"""fedsim: a deterministic desk-scale federated-analytics fleet simulator.

On-device transforms, attestation-gated encrypted reporting, secure sum and
thresholding in a simulated trusted aggregator, three differential-privacy
modes with budgeted periodic release, failure recovery, and federated
quantile estimation.
"""

from .errors import FedsimError
from .query import FederatedQuery, parse_query_config
from .simulation import Scenario, SimulationRunner, run_scenario

__version__ = "0.1.0"

__all__ = [
    "FedsimError",
    "FederatedQuery",
    "parse_query_config",
    "Scenario",
    "SimulationRunner",
    "run_scenario",
    "__version__",
]
