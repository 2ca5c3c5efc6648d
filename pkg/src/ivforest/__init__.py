"""Instrumental causal forests, doubly robust aggregation and policy learning."""
from ._accel import BACKEND, set_threads
from .aggregate import (DoublyRobustScores, EffectEstimate, Histogram, average_effect,
                        compute_dr_scores_itt, compute_dr_scores_late, gate, histogram_bins,
                        ite_quantiles, profile_by_effect_sign, quantile_table, scores_from_model)
from .baseline import TwoSlsFit, fit_2sls, fit_2sls_frame
from .dataset import ObservationFrame, Schema, SubgroupSpec, build_frame, load_csv
from .errors import (DataError, IvForestError, NumericalError, ValidationError,
                     WeakIdentificationError)
from .forest import ForestModel, TreeParams, forest_weights, grow_forest, variable_importance
from .inference import little_bags_variance
from .ivforest import (IteEstimate, IvForestModel, NuisanceParams, fit_iv_forest, predict_ite,
                       solve_local_moment)
from .policy import AllocationResult, PolicyTree, allocate_capacity, learn_policy_tree
from .synth import DgpSpec, brute_force_policy_oracle, generate

__version__ = "0.1.0"
