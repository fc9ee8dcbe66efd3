"""Location-scale mixture approximation and adaptive least-squares density estimation"""

__version__ = "1.0.0"


def configure_caches(maxsize: int):
    """Size the quadrature node-table cache and the kernel-constant cache"""
    from mixtures.kernels import configure_constant_cache
    from mixtures.quadrature import configure_node_cache

    configure_node_cache(maxsize)
    configure_constant_cache(maxsize)
