"""Variational EM for the multi-view mixture."""
from .engine import FitConfig, FitReport, fit, initialise
from .estep import PrecisionFactors, e_step_map, e_step_soft, log_delta
from .mstep import (
    m_step_alpha,
    m_step_beta,
    m_step_mu1,
    m_step_mu_k,
    m_step_p,
    m_step_pi,
    m_step_R,
    m_step_sigma1,
    m_step_sigma_k,
)

__all__ = [
    "FitConfig", "FitReport", "fit", "initialise", "PrecisionFactors", "e_step_map", "e_step_soft",
    "log_delta", "m_step_alpha", "m_step_beta", "m_step_mu1", "m_step_mu_k", "m_step_p", "m_step_pi",
    "m_step_R", "m_step_sigma1", "m_step_sigma_k",
]
