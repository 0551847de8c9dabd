"""Core pipeline modules: configuration, logging and orchestration"""
