# hbtkit test suite
