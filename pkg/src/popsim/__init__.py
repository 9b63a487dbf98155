"""Deterministic discrete-time population microsimulation."""

from .calibration import (CalibrationProblem, CalibrationResult, NelderMeadOptions, TargetTable, calibrate,
                          nelder_mead, objective_wlsq_log)
from .domain import (AccumulationEvent, DomainError, EventOrder, ManipulationEvent, Population, RowUpdate,
                     SimulationDomain, SimulationError, State, Variable, categorical, configure, transition)
from .engine import RunPlan, SimulationRecord, Simulator, merge, partition, run
from .interventions import Intervention, Scenario, intervene, run_counterfactuals, run_scenario
from .sampler import (Design, MeasurementError, MissingnessMechanism, Sample, apply_error, apply_missingness,
                      draw_sample, follow_up)
from .streams import ConstantDraws, LatentDraws, draw_transform, uniform_draw, uniform_draws

__version__ = "0.1.0"
