"""Forward-backward flow: integration and convergence checks"""
