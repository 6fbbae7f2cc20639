"""User-controllable recommender engine.

Trains factorization models over sparse binary features, detects
filter-bubble severity, and responds to user control commands at
inference time via counterfactual scoring and a controllable ranking
policy.
"""

__version__ = "0.1.0"
