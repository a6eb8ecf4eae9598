"""Safe reinforcement learning of robot trajectories among moving obstacles.

Jerk-limited action space, learned backup policy, background-simulation and
network-based collision risk estimation, and an action shield that swaps in
backup actions when the estimated risk is too high.
"""

__version__ = "0.1.0"
