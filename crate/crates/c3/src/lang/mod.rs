//! Language core: syntax tree, addresses, runtime values, parser, and the
//! direct (non-CPS) evaluator.

pub mod addr;
pub mod ast;
pub mod eval;
pub mod machine;
pub mod parse;
pub mod value;

pub use addr::Address;
pub use ast::{ErpKind, Expr, LambdaExpr, PrimOp, SourceId};
pub use eval::{DirectHooks, EnterAction, EvalStats, Evaluator, RuntimeError};
pub use machine::{CallAction, ExitAction, Machine, MachineHooks, Outcome};
pub use parse::{parse_program, ParseError, Program};
pub use value::{Env, EnvNode, Value};
