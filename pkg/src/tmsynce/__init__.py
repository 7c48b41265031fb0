"""Transport-map-assisted coupled MCMC and multilevel estimation."""
