/** CLI wrapper: `node dist/run_session.js http://127.0.0.1:8765` */
import { runScriptedSession } from "./session.js";

const base = process.argv[2] ?? "http://127.0.0.1:8765";

runScriptedSession(base, (line) => console.log(line)).then((report) => {
  console.log(report.ok ? "session ok" : "session FAILED");
  process.exit(report.ok ? 0 : 1);
}, (err) => {
  console.error(err);
  process.exit(1);
});
