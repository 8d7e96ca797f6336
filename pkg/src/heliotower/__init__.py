"""Heliostat field layout, tower plant surrogate, optimizers and sensitivity."""

from .layout import (
    CavityReceiver,
    CylindricalReceiver,
    DesignVector,
    FieldCapacityError,
    FieldLayout,
    Heliostat,
    LayoutConfig,
    azimuthal_shift,
    generate_field,
    group_start_spacing,
    place_line,
    radial_distances,
    select_top,
    transition_gap,
    write_layout_csv,
)
from .optimize import (
    GAConfig,
    OptProblem,
    OptResult,
    coordinate_cycle,
    crossover,
    genetic_run,
    metropolis_seek,
    mutate,
    quasi_newton_refine,
    roulette_select,
    seek_refine,
    write_convergence_log,
)
from .sensitivity import (
    HessianReport,
    NotPositiveDefiniteError,
    StepSelectionError,
    choose_steps,
    correlations,
    fd_gradient,
    fd_hessian,
    hessian_report,
    sigma_inner,
    uncertainties,
)
from .solar import (
    CostModel,
    EfficiencyBreakdown,
    InsolationTable,
    MonthInsolation,
    ObjectiveEvaluator,
    ObjectiveValue,
    PlantParams,
    annual_energy,
    attenuation,
    clear_sky_insolation,
    cosine_efficiency,
    interception,
    objective,
    receiver_cycle_efficiency,
    shadow_block_factor,
    sun_position,
    sun_vector,
)

__version__ = "0.1.0"
