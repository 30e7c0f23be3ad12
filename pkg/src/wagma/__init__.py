"""Wait-avoiding group model averaging SGD over a simulated network.

Subpackages and modules:

- ``topology``: butterfly phase schedules and dynamic group partitions
- ``netsim``: deterministic discrete-event network simulator
- ``collective``: wait-avoiding group allreduce and the blocking global allreduce
- ``problems``: synthetic optimization problems with exact gradient oracles
- ``optim``: the group-averaging optimizer, baselines, and diagnostics
- ``harness``: configs, CLI, experiment orchestration, invariant verification
"""

__version__ = "0.1.0"
