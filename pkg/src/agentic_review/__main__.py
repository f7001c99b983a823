#!/usr/bin/env python3
"""
Main entry point for the agentic review CLI
"""
from agentic_review.cli import main

if __name__ == "__main__":
    main()
