from stableplace.cli import main

raise SystemExit(main())
