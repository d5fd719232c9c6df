# One module per subcommand, each exposing register(subparsers)
