class Tolerances:
    unit_norm = 1e-10  # |‖v‖ - 1| allowed for unit directions
    orthonormal = 1e-10  # ‖VᵀV - I‖_F allowed for patch bases
    retraction = 1e-8  # ‖VᵀV - I‖_F kept by the DAS optimizer
    symmetric = 1e-10  # relative asymmetry allowed in solve_spd
    rank_factor = 1e-12  # rank cutoff = σ_max · max(m, n) · rank_factor
    covariance_ridge = 1e-8  # default ridge = covariance_ridge · trace / d
    kernel_check = 1e-8  # ‖W v_disc‖ / (‖W‖ ‖v_disc‖) allowed for a disconnected part
    dormant_spread = 1e-9  # projection range treated as constant in strict dormancy
    epsilon_ld = 1e-6  # |clean logit difference| below which FLDD excludes an example
    zero_component = 1e-9  # decomposition parts below this norm count as absent


class Sites:
    resid_pre = "resid_pre"
    mlp_post_act = "mlp_post_act"
    mlp_out = "mlp_out"
    resid_post = "resid_post"

    all = (resid_pre, mlp_post_act, mlp_out, resid_post)
