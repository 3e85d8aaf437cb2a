# Multi-particle Anderson model lab: finite-volume multi-scale analysis objects.
