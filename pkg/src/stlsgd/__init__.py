"""Simulated Local SGD and stagewise STL-SGD with exact communication accounting."""
from .data import Dataset, PartitionSpec, load_libsvm, parse_libsvm, partition, synthetic_two_class
from .engine import (ClientFleet, LocalSgdConfig, NumericalDivergence, RunTrace, average_models,
                     local_sgd, run_stagewise, sample_stage_index)
from .objectives import (Objective, ObjectiveConstants, ProxObjective, logistic_objective,
                         objective_value, pl_objective, prox_wrap, quadratic_objective)
from .schedules import (EngineOverrides, Stage, StagePlan, initial_k, plan_baseline, plan_stl_nc,
                        plan_stl_sc)

__version__ = "0.1.0"
