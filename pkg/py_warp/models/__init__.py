"""This is the model subpackage of py_warp: scenarios, stages and studies."""
