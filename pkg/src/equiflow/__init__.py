"""equiflow: shift-equivariant convolutional flows on periodic tensors.

Library layout:

- ``tensor_core``      periodic tensors, circular convolution, pooling, MC norms
- ``hypothesis_nets``  conv layer families, networks, well functions, symmetry checks
- ``flow_engine``      flow maps, Euler/splitting discretization, flow programs
- ``uap_constructor``  residual-to-plain embeddings, point transport, grid pipeline
- ``sharpness_lab``    analytic lower-bound constants and degenerate-net experiments
- ``cli_harness``      the ``equiflow`` command-line front end
"""

from .tensor_core import (
    PeriodicTensor,
    BoxDomain,
    BallDomain,
    LpEstimate,
    circ_conv,
    shift,
    support,
    pool,
    lp_norm_mc,
)
from .hypothesis_nets import (
    ActivationKind,
    RELU,
    SIGMOID,
    TANH,
    ConvChannel,
    ConvLayer,
    ConvNetwork,
    apply_layer,
    apply_network,
    check_equivariance,
    make_well_function,
    serialize_network,
    deserialize_network,
)
from .piecewise import PiecewiseLinearFn
from .flow_engine import (
    FieldTerm,
    VectorField,
    FlowSeg,
    ZoomSeg,
    FlowProgram,
    flow,
    euler_compose,
    flow_split_check,
    run_program,
    discretize_to_resnet,
    serialize_program,
    deserialize_program,
)

__version__ = "0.1.0"
