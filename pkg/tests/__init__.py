# Test modules for pnm-diag
# Shared fixtures live in tests/factories.py
