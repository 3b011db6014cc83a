"""Per-path network delay prediction toolkit.

The package combines a finite-buffer queueing baseline (`qt_engine`), a
heterogeneous graph representation for learned refinement (`hetero_graph`,
`feature_pipeline`), a discrete-event simulator used as ground truth at desk
scale (`sim_oracle`), and evaluation utilities (`metrics`). The `qtrn`
command line exposes the batch pipeline; see README.md for usage and
docs/FORMATS.md for the on-disk formats.
"""

__version__ = "0.1.0"

from qtrn.net_model import (
    Link,
    NetworkSample,
    PathFlow,
    SampleParseError,
    SampleValidationError,
    TrafficDescriptor,
)

__all__ = [
    "Link",
    "NetworkSample",
    "PathFlow",
    "SampleParseError",
    "SampleValidationError",
    "TrafficDescriptor",
    "__version__",
]
