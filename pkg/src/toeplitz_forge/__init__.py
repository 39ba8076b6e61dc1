"""toeplitz-forge: synthesize regular summation matrices that force families
of 0/1 sequences to converge, and verify the construction's guarantees."""

from .creature_core import (
    Creature,
    aver,
    compose,
    divides_factorial,
    make_creature,
    pad_with_zeroes,
    point_mass,
    snap_weights,
    support,
)
from .condition_core import (
    CheckResult,
    Condition,
    LeqWitness,
    NameOracle,
    RowWitness,
    StarWitness,
    approximates,
    compose_witness,
    find_leq_star_witness,
    find_leq_witness,
    fuse_deciding,
    leq,
    leq_i,
    leq_star,
    may,
    pos,
    pos_star,
    prefix_oracle,
    restrict,
    sigma_enum,
    trivial_condition,
)
from .sequence_model import (
    BorelAdapter,
    SequenceFamily,
    SequenceSource,
    dependency_window,
    eval_sequence,
    parse_adapter,
    parse_family,
    sample_name,
    serialize_family,
)
from .synthesis import (
    ErrEntry,
    SynthesisSchedule,
    ToeplitzMatrix,
    amalgamate,
    err,
    parse_matrix,
    refine_level,
    refine_once,
    serialize_matrix,
    stage_err,
    synthesize_matrix,
    thin_factorial,
)
from .verification import (
    VerificationReport,
    alim_trace,
    borel_cantelli_report,
    check_convexity,
    check_regular,
    factorial_tail,
    hoeffding_halfwidth,
    mc_measure_bound,
)

__version__ = "0.1.0"
