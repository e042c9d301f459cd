#include <stdio.h>
#include "chunklens.h"

int main(void) {
    ClTrace *trace = NULL;
    ClStatus st = cl_trace_load("trace.actr", &trace);
    if (st != CL_STATUS_OK) {
        fprintf(stderr, "%s\n", cl_last_error_message());
        return 1;
    }
    size_t layers, tokens, dim;
    cl_trace_shape(trace, &layers, &tokens, &dim);
    ClChunk *chunk = NULL;
    if (cl_chunk_fit(trace, "planted", 0, 0, &chunk) == CL_STATUS_OK) {
        ClConfusion c;
        cl_chunk_evaluate(chunk, trace, &c);
        printf("tp=%zu fp=%zu\n", c.tp, c.fp);
        cl_chunk_free(chunk);
    }
    cl_trace_free(trace);
    printf("%s\n", cl_version());
    return 0;
}
