"""Actor-learner RL training platform.

Two runtimes share one learner core: "mono" keeps actors, buffers and
learner threads in a single process; "poly" streams environment steps from
separate server processes over a framed TCP protocol, batches inference
requests dynamically, and feeds fixed-size rollout batches to the learner.
"""

__version__ = "0.1.0"
