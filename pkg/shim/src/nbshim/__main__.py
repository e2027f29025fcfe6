from .shim import main

main()
