"""
Galaxy clustering toolkit: catalogs and masks, power-spectrum models,
clustered mocks, gridded angular correlation functions, a Karhunen-Loeve
likelihood engine and zero-point systematics filtering.
"""

__version__ = "0.1.0"
