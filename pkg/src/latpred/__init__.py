"""Device-adaptive latency prediction for neural architecture search.

A single regression model is meta-trained over a pool of devices so that it
adapts to a new device from a handful of latency measurements. The package
also ships the surrounding experiment machinery: architecture search spaces,
synthetic device simulators, baseline predictors, and a latency-constrained
search harness.
"""

__version__ = "0.1.0"
