"""Minimum-rate constrained sum-rate precoding for vectored G.fast binders."""

from .channel import (BandPlan, BinderTopology, ChannelFormatError, ChannelTensor,
                      generate_channel, load_channel, save_channel)
from .demand import (DemandSettings, InfeasibleDemandError, PriorityPartition, SolveReport,
                     compare_solvers, heuristic_allocation, solve_alternating, solve_heuristic,
                     subgradient_update)
from .precoding import PrecoderKind, PrecoderStructure, build_structure, make_order, rate
from .region import (RegionPoint, RegionSweepSpec, aggregate, pareto_front, round_robin_study,
                     sweep_region)
from .spectrum import (PowerConstraints, SolverSettings, audit_allocation, solve_srop,
                       solve_wsr, update_disabled)

__version__ = "0.1.0"
