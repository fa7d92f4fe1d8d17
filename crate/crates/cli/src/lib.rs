//! Library half of the command-line front end.
