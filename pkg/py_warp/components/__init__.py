"""Store the numerical components (geometry, flow, kernels, estimates) of py_warp."""
