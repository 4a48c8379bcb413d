"""Growth mixture models for longitudinal outcomes with nonignorable
visit and response missingness: simulation, blocked Gibbs estimation,
model comparison, posterior predictive checking, and a replication-study
harness."""

__version__ = "0.1.0"
