"""Numerical core: forward LQR, estimators, inverse optimal control, horizon search and prediction."""
