#include "corn/cli.hpp"

int main(int argc, char** argv) { return corn::dispatch(argc, argv); }
