"""Distortion-risk-measure policy optimization with smoothed-functional gradients."""

from .distortion import DistortionFunction, g_derivative, g_eval, validate_distortion
from .estimation import (
    ReturnBatch,
    StepCdf,
    choquet_drm,
    drm_offpolicy_estimate,
    drm_onpolicy_estimate,
    edf,
    weighted_cdf,
)
from .mdp import (
    Episode,
    EpisodeBatch,
    MdpSpec,
    Transition,
    discounted_return,
    load_bundled_mdp,
    load_mdp,
    simulate_batch,
    simulate_episode,
    validate_mdp,
)
from .optimizer import (
    OptConfig,
    OptRun,
    drm_offp_sf,
    drm_onp_sf,
    run_optimizer,
    select_random_iterate,
    stationarity_report,
)
from .oracle import (
    ExactOracle,
    OracleRefusal,
    enumerate_return_distribution,
    exact_drm,
    finite_difference_gradient,
    max_importance_ratio,
)
from .policy import BehaviorPolicy, PolicyParams, action_probabilities, importance_ratio, perturb, sample_action
from .sf_gradient import SfConfig, sample_unit_sphere, sf_gradient_estimate

__version__ = "0.1.0"
