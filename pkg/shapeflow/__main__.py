from shapeflow.main import main

raise SystemExit(main())
