// bindings land with the python package
#if 0
#endif
