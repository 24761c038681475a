from drm_rl.mdp import MdpSpec, Transition


def make_mdp(transitions, num_states, num_actions=1, r_max=1.0, gamma=0.9, horizon_cap=10, start_state=1):
    """Build an MdpSpec from (s, a, next, p, r) tuples."""
    return MdpSpec(num_states, num_actions, tuple(Transition(*t) for t in transitions), r_max, start_state, gamma, horizon_cap)
