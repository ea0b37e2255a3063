from quality_fusion import main

main()
