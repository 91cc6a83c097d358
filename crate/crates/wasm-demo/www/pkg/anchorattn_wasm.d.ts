/* tslint:disable */
/* eslint-disable */

export class JsFlopCurves {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly anchor: Float64Array;
    /**
     * Crossover `n`, or `NaN` when anchors never win on the sampled range.
     */
    readonly crossover: number;
    readonly ns: Float64Array;
    readonly vanilla: Float64Array;
}

export class JsMaps {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly anchor: Float64Array;
    readonly anchors: Float64Array;
    readonly maxGap: number;
    readonly n: number;
    readonly vanilla: Float64Array;
}

export class JsTrajectory {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly objective: Float64Array;
    readonly positions: Float64Array;
}

export function attentionMaps(xy: Float64Array, m: number, refine: number, seed: bigint): JsMaps;

export function fitTrajectory(xy: Float64Array, m: number, iterations: number, seed: bigint): JsTrajectory;

export function flopCurves(m: number, d: number, n_max: number, points: number): JsFlopCurves;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_jsflopcurves_free: (a: number, b: number) => void;
    readonly __wbg_jsmaps_free: (a: number, b: number) => void;
    readonly __wbg_jstrajectory_free: (a: number, b: number) => void;
    readonly attentionMaps: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly fitTrajectory: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly flopCurves: (a: number, b: number, c: number, d: number) => number;
    readonly jsflopcurves_anchor: (a: number) => [number, number];
    readonly jsflopcurves_crossover: (a: number) => number;
    readonly jsflopcurves_ns: (a: number) => [number, number];
    readonly jsflopcurves_vanilla: (a: number) => [number, number];
    readonly jsmaps_anchor: (a: number) => [number, number];
    readonly jsmaps_anchors: (a: number) => [number, number];
    readonly jsmaps_maxGap: (a: number) => number;
    readonly jsmaps_n: (a: number) => number;
    readonly jsmaps_vanilla: (a: number) => [number, number];
    readonly jstrajectory_objective: (a: number) => [number, number];
    readonly jstrajectory_positions: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
