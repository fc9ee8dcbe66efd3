"""Experiment plugins, one per mixrate subcommand"""
