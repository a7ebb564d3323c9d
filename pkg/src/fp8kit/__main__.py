"""Allow running as: python -m fp8kit"""

from fp8kit.cli import main

main()
