"""cfx: counterfactual scenario explorer for graph-based traffic forecasting.

Train a compact graph-convolutional GRU speed forecaster on a road network,
then search for minimal static-feature changes (POIs, lanes, speed limits)
that move its prediction on a chosen segment to a target speed, under
user-defined scenario constraints, with Pareto-set ranking and network-wide
impact evaluation.
"""

__version__ = "0.1.0"
