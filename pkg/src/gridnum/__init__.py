"""gridnum: dynamic-pricing demand-response market toolkit.

Solvers for a family of finite-horizon electricity-market welfare problems:
a centralized projected-gradient baseline with a brute-force oracle, a
distributed dual-decomposition price iteration over pluggable message buses,
a spot-market extension, single-user storage control, a greedy heuristic
with a certified optimality-gap bound, and a Newton-accelerated price
update.
"""

from .bus import BusTimeoutError, InProcBus, TcpBus, start_tcp_agents
from .control import (
    SingleUserSolution,
    StructureReport,
    export_structure_csv,
    solve_single_user,
    verify_threshold_structure,
)
from .dual_market import (
    DualConfig,
    UserReply,
    build_agents,
    dual_lipschitz,
    dual_value,
    price_update,
    provider_supply_response,
    run_dual,
    user_best_response,
    user_surplus,
)
from .greedy import gap_upper_bound, greedy_solve
from .model import (
    Allocation,
    Battery,
    DeferrableLoad,
    Horizon,
    ProviderCost,
    ResidualReport,
    Scenario,
    ScenarioError,
    ScenarioParseError,
    ScenarioValidationError,
    SpotMarket,
    UserModel,
    UtilityParams,
    allocation_from_consumption,
    export_allocation_csv,
    feasibility_residuals,
    load_scenario,
    make_allocation,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    validate_scenario,
    welfare,
)
from .newton import (
    NewtonConfig,
    SmoothnessError,
    dual_gradient_and_curvature,
    newton_price_step,
    require_smooth,
    run_newton,
)
from .projections import capped_simplex_project, project_allocation, project_battery
from .scenarios import (
    battery_control_fixture,
    generate_scenario,
    newton_benchmark_set,
    random_market_fixture,
    random_small_scenario,
    spot_fixture,
    t1_scenario,
)
from .solver_core import (
    ConvergenceReport,
    LoggedIterate,
    SolverConfig,
    VariableLayout,
    grid_error_bound,
    implied_prices,
    oracle_solve,
    solve_system,
)
from .spot import (
    SpotFixedPoint,
    provider_spot_response,
    solve_sys_spot,
    spot_interaction_fixed_point,
)

__all__ = [name for name in dir() if not name.startswith("_")]
